//! The relaxed MAP objective and its training loop.
//!
//! Each optimizer step samples one set of relaxed masks, evaluates the
//! mini-batch log-likelihood through the masked forward pass, adds the
//! Bernoulli mask prior and the Gaussian core prior, and ascends with Adam
//! while the sampling temperature decays. The first `warmup_epochs` train
//! the plain tensorized model: no masks are sampled and the logits stay
//! exactly at initialization. Rounding the learned probabilities afterwards
//! is the pruning module's job.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::data::LabeledDataset;
use crate::masks::{self, MaskPrior, TemperatureSchedule};
use crate::model::TensorizedModel;
use crate::rng::Rng;
use crate::{DenseTensor, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Bernoulli keep-probability of the mask prior.
    pub pi: f64,
    /// Mean of the normal logit initialization.
    pub alpha: f64,
    /// Standard deviation of the normal logit initialization.
    pub logit_init_scale: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Epochs trained without mask multiplication at the start.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Scale the batch log-likelihood by N/B so the priors keep their
    /// full-dataset weighting; `false` uses the raw batch sum, which leaves
    /// the prior constant at its per-step strength. The raw sum is the
    /// default: with N/B scaling the mask prior becomes negligible and the
    /// probabilities never polarize.
    pub scale_data_term: bool,
    /// Variance of the zero-mean Gaussian prior over decomposition cores.
    pub core_prior_var: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pi: 0.1,
            alpha: -1.5,
            logit_init_scale: 1e-2,
            tau_start: 0.1,
            tau_end: 0.01,
            warmup_epochs: 3,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 128,
            seed: 1,
            scale_data_term: false,
            core_prior_var: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        MaskPrior::new(self.pi)?;
        TemperatureSchedule::new(self.tau_start, self.tau_end, 1)?;
        if !self.alpha.is_finite() || self.logit_init_scale <= 0.0 {
            return Err(Error::Config("bad logit initialization".into()));
        }
        if self.learning_rate <= 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0)
            || !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0)
        {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.core_prior_var <= 0.0 {
            return Err(Error::Config("core prior variance must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| DenseTensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| DenseTensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update over all parameters; `grads[i]` must match `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [&mut DenseTensor],
        grads: &[DenseTensor],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub expected_compression: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainResult {
    pub epochs: Vec<EpochSummary>,
    /// Mask probabilities per epoch, per mask.
    pub phi_history: Vec<Vec<Vec<f64>>>,
}

pub struct Trainer {
    pub model: TensorizedModel,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: Rng,
    pub epoch: usize,
    pub global_step: u64,
    pub schedule: TemperatureSchedule,
}

impl Trainer {
    /// `train_len` fixes the temperature schedule length (steps per epoch
    /// times epochs) and the N/B data-term scaling.
    pub fn new(model: TensorizedModel, cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Argument("empty training set".into()));
        }
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size) as u64;
        let schedule = TemperatureSchedule::new(
            cfg.tau_start,
            cfg.tau_end,
            steps_per_epoch * cfg.epochs as u64,
        )?;
        let mut shapes: Vec<Vec<usize>> = model
            .param_tensors()
            .iter()
            .map(|p| p.dims().to_vec())
            .collect();
        for (_, mask) in model.masks.iter() {
            shapes.push(vec![mask.logits.len()]);
        }
        let adam = AdamState::new(&shapes);
        let rng = Rng::from_seed(cfg.seed).fork(1);
        Ok(Trainer {
            model,
            cfg,
            adam,
            rng,
            epoch: 0,
            global_step: 0,
            schedule,
        })
    }

    pub fn tau(&self) -> f64 {
        self.schedule.tau(self.global_step)
    }

    fn in_warmup(&self) -> bool {
        self.epoch < self.cfg.warmup_epochs
    }

    /// Run the remaining epochs, streaming metric records to `sink`.
    pub fn run(&mut self, data: &LabeledDataset, sink: &mut dyn Write) -> Result<TrainResult> {
        if data.is_empty() {
            return Err(Error::Argument("empty training set".into()));
        }
        if data.feature_len() != self.model.input_len() {
            return Err(Error::Shape(format!(
                "dataset rows of {} features, model expects {}",
                data.feature_len(),
                self.model.input_len()
            )));
        }
        let mut result = TrainResult::default();
        while self.epoch < self.cfg.epochs {
            let summary = self.run_epoch(data, sink)?;
            result
                .phi_history
                .push(self.model.masks.iter().map(|(id, _)| self.model.masks.phi(id)).collect());
            result.epochs.push(summary);
        }
        Ok(result)
    }

    /// Run exactly one epoch (shuffle, steps, summary record).
    pub fn run_epoch(&mut self, data: &LabeledDataset, sink: &mut dyn Write) -> Result<EpochSummary> {
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut correct = 0usize;
        let warmup = self.in_warmup();
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let (loss, batch_correct) = self.step(&x, &y, n, warmup)?;
            loss_sum += loss;
            correct += batch_correct;
            steps += 1;
            writeln!(
                sink,
                "type=step epoch={} step={} loss={} tau={}",
                self.epoch,
                self.global_step,
                loss,
                self.tau()
            )?;
            self.global_step += 1;
        }

        let rounded = masks::round_masks(&self.model.masks);
        let compact = self.model.param_count_with_rounded(&rounded);
        let expected_compression = self.model.dense_total_count() as f64 / compact as f64;
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_loss: loss_sum / steps as f64,
            train_accuracy: correct as f64 / n as f64,
            expected_compression,
            tau: self.tau(),
        };
        writeln!(
            sink,
            "type=epoch epoch={} mean_loss={} train_acc={} expected_compression={} tau={}",
            summary.epoch,
            summary.mean_loss,
            summary.train_accuracy,
            summary.expected_compression,
            summary.tau
        )?;
        self.epoch += 1;
        Ok(summary)
    }

    /// One optimizer step; returns (loss, correct predictions in batch).
    fn step(
        &mut self,
        x: &DenseTensor,
        y: &[usize],
        train_len: usize,
        warmup: bool,
    ) -> Result<(f64, usize)> {
        let cfg = self.cfg.clone();
        let tau = self.tau();
        let prior = MaskPrior::new(cfg.pi)?;

        // Sample mask noise up front so RNG order is independent of graph
        // assembly details.
        let noise: Option<Vec<DenseTensor>> = if warmup {
            None
        } else {
            Some(
                self.model
                    .masks
                    .iter()
                    .map(|(_, m)| {
                        DenseTensor::new(
                            vec![m.logits.len()],
                            masks::sample_noise(m.logits.len(), &mut self.rng),
                        )
                        .unwrap()
                    })
                    .collect(),
            )
        };

        let tape = Tape::new();
        let param_vars = self.model.bind(&tape);
        let lambda_vars: Vec<Var> = self
            .model
            .masks
            .iter()
            .map(|(_, m)| {
                tape.leaf(DenseTensor::new(vec![m.logits.len()], m.logits.clone()).unwrap())
            })
            .collect();
        let mask_vars: Option<Vec<Var>> = match &noise {
            None => None,
            Some(noise) => Some(
                lambda_vars
                    .iter()
                    .zip(noise)
                    .map(|(&lam, nz)| masks::relaxed_node(&tape, lam, nz, tau))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let xv = tape.constant(x.clone());
        let logits = self
            .model
            .forward_bound(xv, &param_vars, mask_vars.as_deref())?;

        // Batch accuracy from the same forward pass.
        let logits_value = logits.value();
        let classes = logits_value.dims()[1];
        let batch_correct = logits_value
            .data()
            .chunks_exact(classes)
            .zip(y)
            .filter(|(row, &label)| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    == Some(label)
            })
            .count();

        let ce = logits.softmax_cross_entropy_sum(y)?;
        let scale = if cfg.scale_data_term {
            train_len as f64 / y.len() as f64
        } else {
            1.0
        };
        let mut objective = ce.neg().scale(scale);

        if !warmup {
            // Expected mask log-prior, linear in phi.
            let log_pi = cfg.pi.ln();
            let log_1m = (1.0 - cfg.pi).ln();
            for &lam in &lambda_vars {
                let phi = lam.sigmoid();
                let keep = phi.scale(log_pi);
                let drop = phi.neg().add_scalar(1.0).scale(log_1m);
                objective = objective.add(keep.add(drop).sum());
            }
        }
        let _ = prior;

        // Gaussian core prior: -||G||^2 / (2 sigma^2).
        let core_coef = -0.5 / cfg.core_prior_var;
        let core_slots = self.model.core_param_slots();
        let flat_param_vars: Vec<Var> = param_vars.iter().flatten().copied().collect();
        for (&var, &is_core) in flat_param_vars.iter().zip(&core_slots) {
            if is_core {
                objective = objective.add(var.mul(var).sum().scale(core_coef));
            }
        }

        let loss = objective.neg();
        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at epoch {} step {}: {loss_value}",
                self.epoch, self.global_step
            )));
        }
        let grads = loss.backward()?;

        // Flat gradient list: layer params, then mask logits.
        let mut grad_list: Vec<DenseTensor> = flat_param_vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, &v.dims()))
            .collect();
        for &lam in &lambda_vars {
            grad_list.push(grads.get_or_zeros(lam, &lam.dims()));
        }

        // Apply the update: layer params in place, logits via the mask set.
        let mut logit_tensors: Vec<DenseTensor> = self
            .model
            .masks
            .iter()
            .map(|(_, m)| DenseTensor::new(vec![m.logits.len()], m.logits.clone()).unwrap())
            .collect();
        {
            let mut param_refs = self.model.param_tensors_mut();
            let mut all_refs: Vec<&mut DenseTensor> = Vec::with_capacity(
                param_refs.len() + logit_tensors.len(),
            );
            all_refs.extend(param_refs.iter_mut().map(|p| &mut **p));
            all_refs.extend(logit_tensors.iter_mut());
            self.adam.step(
                &mut all_refs,
                &grad_list,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
        }
        let ids: Vec<usize> = self.model.masks.iter().map(|(id, _)| id).collect();
        for (id, tensor) in ids.into_iter().zip(logit_tensors) {
            self.model
                .masks
                .set_logits(id, tensor.into_data())
                .map_err(|e| Error::Diverged(format!("mask logits left the finite range: {e}")))?;
        }

        Ok((loss_value, batch_correct))
    }
}

/// Train a model to completion; convenience wrapper over [`Trainer`].
pub fn train(
    model: TensorizedModel,
    data: &LabeledDataset,
    cfg: TrainConfig,
    sink: &mut dyn Write,
) -> Result<(TensorizedModel, TrainResult)> {
    let mut trainer = Trainer::new(model, cfg, data.len())?;
    let result = trainer.run(data, sink)?;
    Ok((trainer.model, result))
}

/// The relaxed MAP objective at explicitly given mask values (no sampling):
/// `(N/B) sum log p(y|x) + sum [phi log pi + (1-phi) log(1-pi)] -
/// ||cores||^2 / (2 sigma^2)`.
pub fn objective_value(
    model: &TensorizedModel,
    x: &DenseTensor,
    y: &[usize],
    train_len: usize,
    cfg: &TrainConfig,
    mask_values: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let logits = model.forward_values(x, mask_values)?;
    let tape = Tape::new();
    let lv = tape.constant(logits);
    let ce = lv.softmax_cross_entropy_sum(y)?.scalar_value();
    let scale = if cfg.scale_data_term {
        train_len as f64 / y.len() as f64
    } else {
        1.0
    };
    let prior = MaskPrior::new(cfg.pi)?;
    let mask_term = prior.expected_log_prob(&model.masks);
    let core_slots = model.core_param_slots();
    let core_norm: f64 = model
        .param_tensors()
        .iter()
        .zip(&core_slots)
        .filter(|(_, &is_core)| is_core)
        .map(|(p, _)| p.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let value = -scale * ce + mask_term - core_norm / (2.0 * cfg.core_prior_var);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("non-finite objective: {value}")));
    }
    Ok(value)
}
