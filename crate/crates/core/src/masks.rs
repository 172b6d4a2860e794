//! Mask variables over decomposition ranks.
//!
//! Each selectable rank gets a logit vector `lambda`; mask probabilities are
//! `phi = sigmoid(lambda)`. Training samples relaxed masks from the
//! Binary Concrete distribution at a decaying temperature, stretched and
//! hard-clamped so exact 0 and 1 stay in the support. TT boundary ranks are
//! never masked. Which rank-mode of which core a mask covers is recorded by
//! the layer that owns it; this module only stores the variables.

use crate::autodiff::{sigmoid, Tape, Var};
use crate::decomp::{LowRankMatrix, TTDecomposition, TTMatrix, Tucker2};
use crate::rng::Rng;
use crate::{DenseTensor, Error, Result};

/// Stretch interval of the hard-concrete transform.
pub const STRETCH_LO: f64 = -0.1;
pub const STRETCH_HI: f64 = 1.1;

pub type MaskId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVar {
    pub name: String,
    pub logits: Vec<f64>,
}

/// The model-wide collection of mask logit vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    masks: Vec<MaskVar>,
}

impl MaskSet {
    pub fn new() -> Self {
        MaskSet { masks: Vec::new() }
    }

    /// Register a mask of `size` entries with logits drawn from
    /// `Normal(alpha, scale)`.
    pub fn add_mask(
        &mut self,
        name: impl Into<String>,
        size: usize,
        alpha: f64,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<MaskId> {
        if size == 0 {
            return Err(Error::Argument("mask must cover at least one rank entry".into()));
        }
        if !alpha.is_finite() || !scale.is_finite() {
            return Err(Error::Argument("mask logit init must be finite".into()));
        }
        let logits = (0..size).map(|_| rng.normal_with(alpha, scale)).collect();
        self.masks.push(MaskVar {
            name: name.into(),
            logits,
        });
        Ok(self.masks.len() - 1)
    }

    pub fn restore_mask(&mut self, name: impl Into<String>, logits: Vec<f64>) -> MaskId {
        self.masks.push(MaskVar {
            name: name.into(),
            logits,
        });
        self.masks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mask(&self, id: MaskId) -> &MaskVar {
        &self.masks[id]
    }

    pub fn logits(&self, id: MaskId) -> &[f64] {
        &self.masks[id].logits
    }

    pub fn set_logits(&mut self, id: MaskId, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.masks[id].logits.len() {
            return Err(Error::Shape(format!(
                "mask {} has {} entries, got {}",
                self.masks[id].name,
                self.masks[id].logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("mask logits must stay finite".into()));
        }
        self.masks[id].logits = logits;
        Ok(())
    }

    pub fn phi(&self, id: MaskId) -> Vec<f64> {
        self.masks[id].logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MaskId, &MaskVar)> {
        self.masks.iter().enumerate()
    }

    /// Total number of mask entries across all masks.
    pub fn total_entries(&self) -> usize {
        self.masks.iter().map(|m| m.logits.len()).sum()
    }
}

/// Factorized Bernoulli prior with keep-probability `pi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPrior {
    pi: f64,
}

impl MaskPrior {
    pub fn new(pi: f64) -> Result<Self> {
        if !(0.0 < pi && pi < 1.0) {
            return Err(Error::Argument(format!("pi must lie in (0, 1), got {pi}")));
        }
        Ok(MaskPrior { pi })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// Expected log-prior under independent Bernoulli(phi) masks:
    /// `sum_k sum_s [phi log pi + (1 - phi) log(1 - pi)]`.
    pub fn expected_log_prob(&self, masks: &MaskSet) -> f64 {
        let log_pi = self.pi.ln();
        let log_1m = (1.0 - self.pi).ln();
        masks
            .iter()
            .flat_map(|(_, m)| m.logits.iter())
            .map(|&l| {
                let phi = sigmoid(l);
                phi * log_pi + (1.0 - phi) * log_1m
            })
            .sum()
    }

    /// The gradient of the expected log-prior with respect to any `phi`
    /// entry: the constant `log(pi / (1 - pi))`.
    pub fn phi_grad(&self) -> f64 {
        self.pi.ln() - (1.0 - self.pi).ln()
    }
}

/// Exponential decay from `tau_start` to `tau_end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: u64) -> Result<Self> {
        if !(tau_end > 0.0 && tau_start > tau_end) {
            return Err(Error::Argument(format!(
                "need tau_start > tau_end > 0, got {tau_start} and {tau_end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        Ok(TemperatureSchedule {
            tau_start,
            tau_end,
            total_steps,
        })
    }

    pub fn tau(&self, step: u64) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

/// Logistic noise `c = log u - log(1 - u)` for the reparameterized sampler.
pub fn sample_noise(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u = loop {
                let u = rng.uniform();
                if u > 0.0 && u < 1.0 {
                    break u;
                }
            };
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Hard-concrete sample for one entry at fixed noise.
pub fn relaxed_value(logit: f64, noise: f64, tau: f64) -> f64 {
    let s = sigmoid((logit + noise) / tau);
    (s * (STRETCH_HI - STRETCH_LO) + STRETCH_LO).clamp(0.0, 1.0)
}

/// Draw a relaxed mask vector in `[0, 1]`.
pub fn sample_relaxed(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("mask logits must be finite".into()));
    }
    let noise = sample_noise(logits.len(), rng);
    Ok(logits
        .iter()
        .zip(&noise)
        .map(|(&l, &c)| relaxed_value(l, c, tau))
        .collect())
}

/// Tape subgraph computing the hard-concrete sample from a logit leaf and
/// fixed noise; differentiable with respect to the logits.
pub fn relaxed_node<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    noise: &DenseTensor,
    tau: f64,
) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let noise = tape.constant(noise.clone());
    logits
        .add(noise)
        .scale(1.0 / tau)
        .sigmoid()
        .scale(STRETCH_HI - STRETCH_LO)
        .add_scalar(STRETCH_LO)
        .clamp(0.0, 1.0)
}

/// Binary masks obtained by rounding probabilities at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundedMasks {
    kept: Vec<Vec<bool>>,
    rescued: Vec<MaskId>,
}

impl RoundedMasks {
    pub fn from_bits(kept: Vec<Vec<bool>>) -> Self {
        RoundedMasks {
            kept,
            rescued: Vec::new(),
        }
    }

    pub fn bits(&self, id: MaskId) -> &[bool] {
        &self.kept[id]
    }

    pub fn kept_indices(&self, id: MaskId) -> Vec<usize> {
        self.kept[id]
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn kept_count(&self, id: MaskId) -> usize {
        self.kept[id].iter().filter(|&&k| k).count()
    }

    pub fn values(&self, id: MaskId) -> Vec<f64> {
        self.kept[id]
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Masks whose entries all rounded to zero and were rescued by keeping
    /// the largest-probability entry.
    pub fn rescued(&self) -> &[MaskId] {
        &self.rescued
    }
}

/// Round `phi >= 0.5` to 1. A mask rounding to all zeros keeps its single
/// largest-probability entry instead, since a fully removed rank would leave
/// the model undefined.
pub fn round_masks(masks: &MaskSet) -> RoundedMasks {
    let mut kept = Vec::with_capacity(masks.len());
    let mut rescued = Vec::new();
    for (id, mask) in masks.iter() {
        let phi: Vec<f64> = mask.logits.iter().map(|&l| sigmoid(l)).collect();
        let mut bits: Vec<bool> = phi.iter().map(|&p| p >= 0.5).collect();
        if bits.iter().all(|&b| !b) {
            let argmax = phi
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            bits[argmax] = true;
            rescued.push(id);
            log::warn!(
                "mask {} rounded to all zeros; keeping entry {} (phi = {:.4})",
                mask.name,
                argmax,
                phi[argmax]
            );
        }
        kept.push(bits);
    }
    RoundedMasks { kept, rescued }
}

/// Scale core `k`'s outgoing rank mode by mask `k` (one multiplication per
/// mask along the chain).
pub fn apply_masks_tt_matrix(ttm: &TTMatrix, values: &[Vec<f64>]) -> Result<TTMatrix> {
    let d = ttm.cores().len();
    if values.len() + 1 != d {
        return Err(Error::Shape(format!(
            "{} masks for a {d}-core TT matrix (need d-1)",
            values.len()
        )));
    }
    let mut cores = ttm.cores().to_vec();
    for (k, vals) in values.iter().enumerate() {
        cores[k] = cores[k].mode_k_hadamard(vals, 3)?;
    }
    TTMatrix::new(cores)
}

/// Paper-literal masking: every rank mode of every core is multiplied, so
/// each interior mask lands on both adjacent cores.
pub fn apply_masks_tt_matrix_all_modes(ttm: &TTMatrix, values: &[Vec<f64>]) -> Result<TTMatrix> {
    let d = ttm.cores().len();
    if values.len() + 1 != d {
        return Err(Error::Shape(format!(
            "{} masks for a {d}-core TT matrix (need d-1)",
            values.len()
        )));
    }
    let mut cores = ttm.cores().to_vec();
    for k in 0..d {
        if k > 0 {
            cores[k] = cores[k].mode_k_hadamard(&values[k - 1], 0)?;
        }
        if k < d - 1 {
            cores[k] = cores[k].mode_k_hadamard(&values[k], 3)?;
        }
    }
    TTMatrix::new(cores)
}

pub fn apply_masks_tt(tt: &TTDecomposition, values: &[Vec<f64>]) -> Result<TTDecomposition> {
    let d = tt.cores().len();
    if values.len() + 1 != d {
        return Err(Error::Shape(format!(
            "{} masks for a {d}-core TT chain (need d-1)",
            values.len()
        )));
    }
    let mut cores = tt.cores().to_vec();
    for (k, vals) in values.iter().enumerate() {
        cores[k] = cores[k].mode_k_hadamard(vals, 2)?;
    }
    TTDecomposition::new(cores)
}

pub fn apply_masks_tucker2(t: &Tucker2, m1: &[f64], m2: &[f64]) -> Result<Tucker2> {
    Tucker2::new(
        t.core.clone(),
        t.u1.mode_k_hadamard(m1, 1)?,
        t.u2.mode_k_hadamard(m2, 1)?,
    )
}

pub fn apply_masks_tucker2_all_modes(t: &Tucker2, m1: &[f64], m2: &[f64]) -> Result<Tucker2> {
    Tucker2::new(
        t.core.mode_k_hadamard(m1, 0)?.mode_k_hadamard(m2, 1)?,
        t.u1.mode_k_hadamard(m1, 1)?,
        t.u2.mode_k_hadamard(m2, 1)?,
    )
}

pub fn apply_masks_low_rank(lr: &LowRankMatrix, m: &[f64]) -> Result<LowRankMatrix> {
    LowRankMatrix::new(lr.u1.mode_k_hadamard(m, 1)?, lr.u2.clone())
}

pub fn apply_masks_low_rank_all_modes(lr: &LowRankMatrix, m: &[f64]) -> Result<LowRankMatrix> {
    LowRankMatrix::new(
        lr.u1.mode_k_hadamard(m, 1)?,
        lr.u2.mode_k_hadamard(m, 0)?,
    )
}
