//! The model container: an ordered layer list sharing one mask set.

use crate::autodiff::{Tape, Var};
use crate::layers::Layer;
use crate::masks::{MaskSet, RoundedMasks};
use crate::{DenseTensor, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorizedModel {
    pub layers: Vec<Layer>,
    pub masks: MaskSet,
    /// Per-sample input shape; batches arrive flattened and are reshaped.
    pub input_dims: Vec<usize>,
}

impl TensorizedModel {
    pub fn new(layers: Vec<Layer>, masks: MaskSet, input_dims: Vec<usize>) -> Result<Self> {
        let model = TensorizedModel {
            layers,
            masks,
            input_dims,
        };
        model.validate()?;
        Ok(model)
    }

    /// Walk the shape chain and check every mask reference.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("model needs at least one layer".into()));
        }
        let mut shape = self.input_dims.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            for id in layer.mask_ids() {
                if id >= self.masks.len() {
                    return Err(Error::Internal(format!(
                        "layer {i} references mask {id} but only {} exist",
                        self.masks.len()
                    )));
                }
            }
        }
        if shape.len() != 1 {
            return Err(Error::Shape(format!(
                "model must end in a class-score vector, got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_dims.clone();
        for layer in &self.layers {
            shape = layer.out_shape(&shape).expect("validated model");
        }
        shape[0]
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// Record every parameter tensor as a tape leaf, layer by layer.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Vec<Var<'t>>> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }

    /// Forward pass over bound parameters. `mask_vars`, when present, is
    /// indexed by `MaskId` and must cover every mask.
    pub fn forward_bound<'t>(
        &self,
        x: Var<'t>,
        params: &[Vec<Var<'t>>],
        mask_vars: Option<&[Var<'t>]>,
    ) -> Result<Var<'t>> {
        let xdims = x.dims();
        if xdims.len() != 2 || xdims[1] != self.input_len() {
            return Err(Error::Shape(format!(
                "model expects (batch, {}), got {:?}",
                self.input_len(),
                xdims
            )));
        }
        let batch = xdims[0];
        let mut dims = vec![batch];
        dims.extend_from_slice(&self.input_dims);
        let mut z = x.reshape(&dims);
        for (layer, layer_params) in self.layers.iter().zip(params) {
            let layer_masks: Option<Vec<Var<'t>>> = mask_vars.map(|mv| {
                layer.mask_ids().iter().map(|&id| mv[id]).collect()
            });
            z = layer.forward_tape(z, layer_params, layer_masks.as_deref())?;
        }
        Ok(z)
    }

    /// Pure forward pass; masks given as plain values indexed by `MaskId`.
    pub fn forward_values(
        &self,
        x: &DenseTensor,
        mask_values: Option<&[Vec<f64>]>,
    ) -> Result<DenseTensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = self.bind(&tape);
        let mask_vars: Option<Vec<Var>> = match mask_values {
            Some(values) => {
                if values.len() != self.masks.len() {
                    return Err(Error::Shape(format!(
                        "{} mask value vectors for {} masks",
                        values.len(),
                        self.masks.len()
                    )));
                }
                Some(
                    values
                        .iter()
                        .map(|v| {
                            Ok(tape
                                .constant(DenseTensor::new(vec![v.len()], v.clone())?))
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        Ok(self
            .forward_bound(xv, &params, mask_vars.as_deref())?
            .value())
    }

    /// Argmax class per row.
    pub fn predict(
        &self,
        x: &DenseTensor,
        mask_values: Option<&[Vec<f64>]>,
    ) -> Result<Vec<usize>> {
        let scores = self.forward_values(x, mask_values)?;
        let classes = scores.dims()[1];
        Ok(scores
            .data()
            .chunks_exact(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Accuracy over a full input matrix, evaluated in batches.
    pub fn accuracy(
        &self,
        inputs: &DenseTensor,
        labels: &[usize],
        mask_values: Option<&[Vec<f64>]>,
        batch_size: usize,
    ) -> Result<f64> {
        let n = inputs.dims()[0];
        if n != labels.len() {
            return Err(Error::Shape(format!(
                "{n} inputs vs {} labels",
                labels.len()
            )));
        }
        let width = inputs.dims()[1];
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let batch = DenseTensor::new(
                vec![end - start, width],
                inputs.data()[start * width..end * width].to_vec(),
            )?;
            let preds = self.predict(&batch, mask_values)?;
            correct += preds
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, l)| p == l)
                .count();
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    /// Flat parameter list in deterministic order (masks excluded).
    pub fn param_tensors(&self) -> Vec<&DenseTensor> {
        self.layers.iter().flat_map(|l| l.param_tensors()).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_tensors_mut())
            .collect()
    }

    /// Per flat parameter slot: does the Gaussian core prior apply.
    pub fn core_param_slots(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.core_param_slots())
            .collect()
    }

    /// Stored weight parameters (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    /// Weights of the dense model this one replaces (biases excluded).
    pub fn dense_weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.dense_weight_count()).sum()
    }

    /// All stored parameters including biases.
    pub fn total_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight_count() + l.bias_count())
            .sum()
    }

    /// All parameters of the dense reference model including biases.
    pub fn dense_total_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.dense_weight_count() + l.bias_count())
            .sum()
    }

    /// Stored parameters if every masked rank were cut to its kept entries.
    pub fn param_count_with_rounded(&self, rounded: &RoundedMasks) -> usize {
        let kept = |id| rounded.kept_count(id);
        self.layers
            .iter()
            .map(|l| l.weight_count_with_kept(&kept) + l.bias_count())
            .sum()
    }

    /// Mask values reproducing the unmasked model (all ones).
    pub fn all_ones_mask_values(&self) -> Vec<Vec<f64>> {
        self.masks
            .iter()
            .map(|(_, m)| vec![1.0; m.logits.len()])
            .collect()
    }
}
