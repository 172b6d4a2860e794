//! Convert a trained masked model into a strictly smaller one.
//!
//! Rounded masks pick the surviving rank entries; every covered rank mode of
//! every core is sliced to those entries, with adjacent cores sliced
//! consistently. Output equivalence against the hard-masked original is
//! verified on a probe batch inside [`prune`] itself; a failed check aborts
//! the pruning rather than returning a silently wrong model.

use std::fmt::Write as _;
use std::time::Instant;

use crate::decomp::{LowRankMatrix, TTMatrix, Tucker2};
use crate::layers::{Layer, TTEmbeddingLayer, TTLinearLayer};
use crate::masks::{MaskSet, RoundedMasks};
use crate::model::TensorizedModel;
use crate::rng::Rng;
use crate::tensor::kernels;
use crate::{DenseTensor, Error, Result};

/// Deviation beyond this aborts pruning. Identical summation order makes the
/// expected deviation exactly zero.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

const PROBE_BATCH: usize = 256;
const PROBE_SEED: u64 = 0x9e3779b9;

/// Saturated logit used for the compact model's all-ones masks.
const KEEP_LOGIT: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPruneReport {
    pub index: usize,
    pub kind: String,
    /// Full rank tuple after pruning (TT layers include boundary 1s).
    pub kept_ranks: Vec<usize>,
    pub weights_before: usize,
    pub weights_after: usize,
    pub dense_weights: usize,
    /// Dense weights over pruned weights; 1.0 for undecomposed layers.
    pub layer_compression: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneReport>,
    /// Stored parameters including biases.
    pub params_before: usize,
    pub params_after: usize,
    /// Parameters of the dense reference model including biases.
    pub dense_params: usize,
    pub model_compression_before: f64,
    pub model_compression_after: f64,
    /// Multiply-adds of one probe forward pass, per sample.
    pub flops_per_sample_before: f64,
    pub flops_per_sample_after: f64,
    /// Largest absolute output difference between the hard-masked original
    /// and the compact model over the probe batch.
    pub max_deviation: f64,
    /// Names of masks that rounded to all zeros and kept one entry.
    pub rescued_masks: Vec<String>,
    /// Median wall-clock ratio (original / compact) over five probe passes;
    /// only measured on request.
    pub speedup: Option<f64>,
}

fn kept_or_all(rounded: &RoundedMasks, id: usize) -> Vec<usize> {
    rounded.kept_indices(id)
}

fn prune_tt_matrix(
    weights: &TTMatrix,
    mask_ids: &[usize],
    rounded: &RoundedMasks,
) -> Result<TTMatrix> {
    let d = weights.cores().len();
    let mut cores = Vec::with_capacity(d);
    for (k, core) in weights.cores().iter().enumerate() {
        let mut sliced = core.clone();
        if k > 0 {
            sliced = sliced.take(0, &kept_or_all(rounded, mask_ids[k - 1]))?;
        }
        if k < d - 1 {
            sliced = sliced.take(3, &kept_or_all(rounded, mask_ids[k]))?;
        }
        cores.push(sliced);
    }
    TTMatrix::new(cores)
}

fn prune_layer(layer: &Layer, rounded: &RoundedMasks) -> Result<Layer> {
    Ok(match layer {
        Layer::TTLinear(l) => Layer::TTLinear(TTLinearLayer {
            weights: prune_tt_matrix(&l.weights, &l.mask_ids, rounded)?,
            bias: l.bias.clone(),
            mask_ids: l.mask_ids.clone(),
        }),
        Layer::TTEmbedding(l) => Layer::TTEmbedding(TTEmbeddingLayer {
            weights: prune_tt_matrix(&l.weights, &l.mask_ids, rounded)?,
            mask_ids: l.mask_ids.clone(),
        }),
        Layer::LowRank(l) => {
            let kept = kept_or_all(rounded, l.mask_id);
            Layer::LowRank(crate::layers::LowRankLinearLayer {
                weights: LowRankMatrix::new(
                    l.weights.u1.take(1, &kept)?,
                    l.weights.u2.take(0, &kept)?,
                )?,
                bias: l.bias.clone(),
                mask_id: l.mask_id,
            })
        }
        Layer::Tucker2Conv(l) => {
            let k1 = kept_or_all(rounded, l.mask_ids[0]);
            let k2 = kept_or_all(rounded, l.mask_ids[1]);
            Layer::Tucker2Conv(crate::layers::Tucker2ConvLayer {
                weights: Tucker2::new(
                    l.weights.core.take(0, &k1)?.take(1, &k2)?,
                    l.weights.u1.take(1, &k1)?,
                    l.weights.u2.take(1, &k2)?,
                )?,
                bias: l.bias.clone(),
                stride: l.stride,
                padding: l.padding,
                mask_ids: l.mask_ids,
            })
        }
        other => other.clone(),
    })
}

fn layer_kind(layer: &Layer) -> &'static str {
    match layer {
        Layer::TTLinear(_) => "tt_linear",
        Layer::LowRank(_) => "low_rank",
        Layer::Tucker2Conv(_) => "tucker2_conv",
        Layer::TTEmbedding(_) => "tt_embedding",
        Layer::Dense(_) => "dense",
        Layer::DenseConv(_) => "dense_conv",
        Layer::Relu => "relu",
        Layer::MaxPool2 => "max_pool2",
        Layer::Flatten => "flatten",
    }
}

fn kept_rank_tuple(layer: &Layer, rounded: &RoundedMasks) -> Vec<usize> {
    match layer {
        Layer::TTLinear(l) => {
            let mut ranks = vec![1usize];
            ranks.extend(l.mask_ids.iter().map(|&id| rounded.kept_count(id)));
            ranks.push(1);
            ranks
        }
        Layer::TTEmbedding(l) => {
            let mut ranks = vec![1usize];
            ranks.extend(l.mask_ids.iter().map(|&id| rounded.kept_count(id)));
            ranks.push(1);
            ranks
        }
        Layer::LowRank(l) => vec![rounded.kept_count(l.mask_id)],
        Layer::Tucker2Conv(l) => vec![
            rounded.kept_count(l.mask_ids[0]),
            rounded.kept_count(l.mask_ids[1]),
        ],
        _ => Vec::new(),
    }
}

/// Probe inputs shared by verification, FLOP estimates and timing.
fn probe_inputs(model: &TensorizedModel) -> DenseTensor {
    let mut rng = Rng::from_seed(PROBE_SEED);
    let width = model.input_len();
    DenseTensor::new(
        vec![PROBE_BATCH, width],
        (0..PROBE_BATCH * width).map(|_| rng.normal()).collect(),
    )
    .unwrap()
}

/// Slice zeroed rank entries out of every core and verify the compact model
/// against the hard-masked original on a probe batch.
pub fn prune(
    model: &TensorizedModel,
    rounded: &RoundedMasks,
) -> Result<(TensorizedModel, PruneReport)> {
    if rounded.len() != model.masks.len() {
        return Err(Error::Internal(format!(
            "{} rounded masks for {} mask variables",
            rounded.len(),
            model.masks.len()
        )));
    }
    for (id, mask) in model.masks.iter() {
        if rounded.bits(id).len() != mask.logits.len() {
            return Err(Error::Internal(format!(
                "mask {} has {} entries, rounded to {}",
                mask.name,
                mask.logits.len(),
                rounded.bits(id).len()
            )));
        }
        if rounded.kept_count(id) == 0 {
            return Err(Error::Internal(format!(
                "mask {} kept no entries; rounding should have rescued it",
                mask.name
            )));
        }
    }

    let layers: Vec<Layer> = model
        .layers
        .iter()
        .map(|l| prune_layer(l, rounded))
        .collect::<Result<_>>()?;

    // Compact mask set: same masks, kept sizes, saturated keep-logits.
    let mut masks = MaskSet::new();
    for (id, mask) in model.masks.iter() {
        masks.restore_mask(mask.name.clone(), vec![KEEP_LOGIT; rounded.kept_count(id)]);
    }

    let compact = TensorizedModel::new(layers, masks, model.input_dims.clone())?;

    // Mandatory equivalence check on the probe batch.
    let probe = probe_inputs(model);
    let mask_values: Vec<Vec<f64>> = model.masks.iter().map(|(id, _)| rounded.values(id)).collect();

    kernels::reset_flops();
    let masked_out = model.forward_values(&probe, Some(&mask_values))?;
    let flops_before = kernels::flops();
    kernels::reset_flops();
    let compact_out = compact.forward_values(&probe, None)?;
    let flops_after = kernels::flops();

    let max_deviation = masked_out
        .data()
        .iter()
        .zip(compact_out.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if !(max_deviation <= EQUIVALENCE_TOLERANCE) {
        return Err(Error::Internal(format!(
            "pruned model deviates from masked model by {max_deviation:e} (tolerance {EQUIVALENCE_TOLERANCE:e})"
        )));
    }

    let layer_reports = model
        .layers
        .iter()
        .zip(&compact.layers)
        .enumerate()
        .map(|(index, (before, after))| {
            let dense = before.dense_weight_count();
            let weights_after = after.weight_count();
            LayerPruneReport {
                index,
                kind: layer_kind(before).to_string(),
                kept_ranks: kept_rank_tuple(before, rounded),
                weights_before: before.weight_count(),
                weights_after,
                dense_weights: dense,
                layer_compression: if weights_after == 0 {
                    1.0
                } else {
                    dense as f64 / weights_after as f64
                },
            }
        })
        .collect();

    let params_before = model.total_param_count();
    let params_after = compact.total_param_count();
    let dense_params = model.dense_total_count();
    let report = PruneReport {
        layers: layer_reports,
        params_before,
        params_after,
        dense_params,
        model_compression_before: dense_params as f64 / params_before as f64,
        model_compression_after: dense_params as f64 / params_after as f64,
        flops_per_sample_before: flops_before as f64 / PROBE_BATCH as f64,
        flops_per_sample_after: flops_after as f64 / PROBE_BATCH as f64,
        max_deviation,
        rescued_masks: rounded
            .rescued()
            .iter()
            .map(|&id| model.masks.mask(id).name.clone())
            .collect(),
        speedup: None,
    };
    Ok((compact, report))
}

/// Median wall-clock ratio (original / compact) over five probe passes.
pub fn measure_speedup(original: &TensorizedModel, compact: &TensorizedModel) -> Result<f64> {
    let probe = probe_inputs(original);
    let ones = original.all_ones_mask_values();
    let time = |model: &TensorizedModel, masks: Option<&[Vec<f64>]>| -> Result<f64> {
        let mut samples = Vec::with_capacity(5);
        for _ in 0..5 {
            let start = Instant::now();
            let _ = model.forward_values(&probe, masks)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        samples.sort_by(f64::total_cmp);
        Ok(samples[2])
    };
    let before = time(original, Some(&ones))?;
    let after = time(compact, None)?;
    Ok(before / after)
}

/// Human-readable report: a summary section followed by one section per
/// decomposed layer.
pub fn render_report(report: &PruneReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[summary]");
    let _ = writeln!(out, "dense_params = {}", report.dense_params);
    let _ = writeln!(out, "params_before = {}", report.params_before);
    let _ = writeln!(out, "params_after = {}", report.params_after);
    let _ = writeln!(
        out,
        "model_compression_before = {:.2}",
        report.model_compression_before
    );
    let _ = writeln!(
        out,
        "model_compression_after = {:.2}",
        report.model_compression_after
    );
    let _ = writeln!(
        out,
        "flops_per_sample_before = {:.0}",
        report.flops_per_sample_before
    );
    let _ = writeln!(
        out,
        "flops_per_sample_after = {:.0}",
        report.flops_per_sample_after
    );
    let _ = writeln!(out, "max_deviation = {:e}", report.max_deviation);
    let _ = writeln!(
        out,
        "rescued_masks = {}",
        if report.rescued_masks.is_empty() {
            "none".to_string()
        } else {
            report.rescued_masks.join(",")
        }
    );
    if let Some(s) = report.speedup {
        let _ = writeln!(out, "speedup = {s:.2}");
    }
    for layer in &report.layers {
        if layer.weights_before == 0 {
            continue;
        }
        let _ = writeln!(out, "\n[layer {} {}]", layer.index, layer.kind);
        if !layer.kept_ranks.is_empty() {
            let ranks: Vec<String> = layer.kept_ranks.iter().map(|r| r.to_string()).collect();
            let _ = writeln!(out, "kept_ranks = {}", ranks.join(","));
        }
        let _ = writeln!(out, "weights_before = {}", layer.weights_before);
        let _ = writeln!(out, "weights_after = {}", layer.weights_after);
        let _ = writeln!(out, "dense_weights = {}", layer.dense_weights);
        let _ = writeln!(out, "layer_compression = {:.2}", layer.layer_compression);
    }
    out
}
