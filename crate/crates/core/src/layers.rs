//! Model layers operating directly on decomposition cores.
//!
//! Decomposed layers never materialize their dense weight; the TT linear
//! layer contracts its core chain right to left, and the Tucker-2
//! convolution runs as a 1x1, k x k, 1x1 convolution sequence (im2col plus
//! matrix multiply). Relaxed masks are multiplied once per selectable rank,
//! onto the intermediate activation that carries that rank.

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::decomp::{LowRankMatrix, TTMatrix, Tucker2};
use crate::masks::MaskId;
use crate::{DenseTensor, Error, Result};

/// Fully-connected layer with a TT-matrix weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TTLinearLayer {
    pub weights: TTMatrix,
    pub bias: DenseTensor,
    /// One mask per interior rank, chain order (r_1 .. r_{d-1}).
    pub mask_ids: Vec<MaskId>,
}

/// Fully-connected layer with `W = U1 U2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankLinearLayer {
    pub weights: LowRankMatrix,
    pub bias: DenseTensor,
    pub mask_id: MaskId,
}

/// Convolution with a Tucker-2 decomposed kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tucker2ConvLayer {
    pub weights: Tucker2,
    pub bias: DenseTensor,
    pub stride: usize,
    pub padding: usize,
    /// Masks over (r_1, r_2).
    pub mask_ids: [MaskId; 2],
}

/// Embedding table stored as a TT-matrix over (vocab factors) x (dim
/// factors); rows are evaluated directly from the cores.
#[derive(Clone, Debug, PartialEq)]
pub struct TTEmbeddingLayer {
    pub weights: TTMatrix,
    pub mask_ids: Vec<MaskId>,
}

/// Plain dense linear layer, used for baselines and undecomposed layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinearLayer {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

/// Plain convolution with kernel dims (C_in, C_out, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseConvLayer {
    pub kernel: DenseTensor,
    pub bias: DenseTensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    TTLinear(TTLinearLayer),
    LowRank(LowRankLinearLayer),
    Tucker2Conv(Tucker2ConvLayer),
    TTEmbedding(TTEmbeddingLayer),
    Dense(DenseLinearLayer),
    DenseConv(DenseConvLayer),
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    /// Parameter tensors in canonical order (cores first, bias last).
    pub fn param_tensors(&self) -> Vec<&DenseTensor> {
        match self {
            Layer::TTLinear(l) => {
                let mut ps: Vec<&DenseTensor> = l.weights.cores().iter().collect();
                ps.push(&l.bias);
                ps
            }
            Layer::LowRank(l) => vec![&l.weights.u1, &l.weights.u2, &l.bias],
            Layer::Tucker2Conv(l) => {
                vec![&l.weights.core, &l.weights.u1, &l.weights.u2, &l.bias]
            }
            Layer::TTEmbedding(l) => l.weights.cores().iter().collect(),
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::DenseConv(l) => vec![&l.kernel, &l.bias],
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => Vec::new(),
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        match self {
            Layer::TTLinear(l) => {
                let mut ps: Vec<&mut DenseTensor> = l.weights.cores_mut().iter_mut().collect();
                ps.push(&mut l.bias);
                ps
            }
            Layer::LowRank(l) => vec![&mut l.weights.u1, &mut l.weights.u2, &mut l.bias],
            Layer::Tucker2Conv(l) => vec![
                &mut l.weights.core,
                &mut l.weights.u1,
                &mut l.weights.u2,
                &mut l.bias,
            ],
            Layer::TTEmbedding(l) => l.weights.cores_mut().iter_mut().collect(),
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::DenseConv(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => Vec::new(),
        }
    }

    /// Which parameter slots are decomposition cores (the Gaussian prior
    /// applies to these; biases and dense weights are excluded).
    pub fn core_param_slots(&self) -> Vec<bool> {
        match self {
            Layer::TTLinear(l) => {
                let mut s = vec![true; l.weights.cores().len()];
                s.push(false);
                s
            }
            Layer::LowRank(_) => vec![true, true, false],
            Layer::Tucker2Conv(_) => vec![true, true, true, false],
            Layer::TTEmbedding(l) => vec![true; l.weights.cores().len()],
            Layer::Dense(_) => vec![false, false],
            Layer::DenseConv(_) => vec![false, false],
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => Vec::new(),
        }
    }

    pub fn mask_ids(&self) -> Vec<MaskId> {
        match self {
            Layer::TTLinear(l) => l.mask_ids.clone(),
            Layer::LowRank(l) => vec![l.mask_id],
            Layer::Tucker2Conv(l) => l.mask_ids.to_vec(),
            Layer::TTEmbedding(l) => l.mask_ids.clone(),
            _ => Vec::new(),
        }
    }

    /// Weight parameters actually stored (biases excluded).
    pub fn weight_count(&self) -> usize {
        match self {
            Layer::TTLinear(l) => l.weights.param_count(),
            Layer::LowRank(l) => l.weights.param_count(),
            Layer::Tucker2Conv(l) => l.weights.param_count(),
            Layer::TTEmbedding(l) => l.weights.param_count(),
            Layer::Dense(l) => l.weight.len(),
            Layer::DenseConv(l) => l.kernel.len(),
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match self {
            Layer::TTLinear(l) => l.bias.len(),
            Layer::LowRank(l) => l.bias.len(),
            Layer::Tucker2Conv(l) => l.bias.len(),
            Layer::Dense(l) => l.bias.len(),
            Layer::DenseConv(l) => l.bias.len(),
            Layer::TTEmbedding(_) | Layer::Relu | Layer::MaxPool2 | Layer::Flatten => 0,
        }
    }

    /// Weight parameters of the dense layer this one replaces.
    pub fn dense_weight_count(&self) -> usize {
        match self {
            Layer::TTLinear(l) => l.weights.nrows() * l.weights.ncols(),
            Layer::LowRank(l) => l.weights.nrows() * l.weights.ncols(),
            Layer::Tucker2Conv(l) => {
                let (r1, r2) = (l.weights.u1.dims()[0], l.weights.u2.dims()[0]);
                let k = l.weights.core.dims()[2];
                r1 * r2 * k * k
            }
            Layer::TTEmbedding(l) => l.weights.nrows() * l.weights.ncols(),
            Layer::Dense(l) => l.weight.len(),
            Layer::DenseConv(l) => l.kernel.len(),
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => 0,
        }
    }

    /// Weight count after restricting each masked rank to `kept(id)` entries.
    pub fn weight_count_with_kept(&self, kept: &dyn Fn(MaskId) -> usize) -> usize {
        match self {
            Layer::TTLinear(l) => tt_kept_params(&l.weights, &l.mask_ids, kept),
            Layer::LowRank(l) => {
                let r = kept(l.mask_id);
                l.weights.nrows() * r + r * l.weights.ncols()
            }
            Layer::Tucker2Conv(l) => {
                let (r1, r2) = (kept(l.mask_ids[0]), kept(l.mask_ids[1]));
                let k = l.weights.core.dims()[2];
                let (c_in, c_out) = (l.weights.u1.dims()[0], l.weights.u2.dims()[0]);
                r1 * r2 * k * k + c_in * r1 + c_out * r2
            }
            Layer::TTEmbedding(l) => tt_kept_params(&l.weights, &l.mask_ids, kept),
            other => other.weight_count(),
        }
    }

    /// Output shape for one sample (batch excluded).
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let flat: usize = in_shape.iter().product();
        match self {
            Layer::TTLinear(l) => {
                if flat != l.weights.ncols() {
                    return Err(Error::Shape(format!(
                        "TT linear expects {} inputs, got {in_shape:?}",
                        l.weights.ncols()
                    )));
                }
                Ok(vec![l.weights.nrows()])
            }
            Layer::LowRank(l) => {
                if flat != l.weights.ncols() {
                    return Err(Error::Shape(format!(
                        "low-rank linear expects {} inputs, got {in_shape:?}",
                        l.weights.ncols()
                    )));
                }
                Ok(vec![l.weights.nrows()])
            }
            Layer::Dense(l) => {
                if flat != l.weight.dims()[1] {
                    return Err(Error::Shape(format!(
                        "dense linear expects {} inputs, got {in_shape:?}",
                        l.weight.dims()[1]
                    )));
                }
                Ok(vec![l.weight.dims()[0]])
            }
            Layer::Tucker2Conv(l) => conv_out_shape(
                in_shape,
                l.weights.u1.dims()[0],
                l.weights.u2.dims()[0],
                l.weights.core.dims()[2],
                l.stride,
                l.padding,
            ),
            Layer::DenseConv(l) => conv_out_shape(
                in_shape,
                l.kernel.dims()[0],
                l.kernel.dims()[1],
                l.kernel.dims()[2],
                l.stride,
                l.padding,
            ),
            Layer::Relu => Ok(in_shape.to_vec()),
            Layer::MaxPool2 => {
                if in_shape.len() != 3 || in_shape[1] % 2 != 0 || in_shape[2] % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "max pool expects (C, even H, even W), got {in_shape:?}"
                    )));
                }
                Ok(vec![in_shape[0], in_shape[1] / 2, in_shape[2] / 2])
            }
            Layer::Flatten => Ok(vec![flat]),
            Layer::TTEmbedding(_) => Err(Error::Argument(
                "embedding layers are lookup-only and cannot sit in a forward chain".into(),
            )),
        }
    }

    /// Record this layer's parameters as tape leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.param_tensors()
            .into_iter()
            .map(|p| tape.leaf(p.clone()))
            .collect()
    }

    /// Forward pass on the tape. `params` must come from [`Layer::bind`];
    /// `masks` are this layer's relaxed mask variables in `mask_ids` order.
    pub fn forward_tape<'t>(
        &self,
        x: Var<'t>,
        params: &[Var<'t>],
        masks: Option<&[Var<'t>]>,
    ) -> Result<Var<'t>> {
        match self {
            Layer::TTLinear(l) => tt_linear_forward(l, x, params, masks),
            Layer::LowRank(l) => low_rank_forward(l, x, params, masks),
            Layer::Tucker2Conv(l) => tucker2_conv_forward(l, x, params, masks),
            Layer::Dense(_) => {
                let (w, b) = (params[0], params[1]);
                Ok(x.matmul(w.permute(&[1, 0])).add_row(b))
            }
            Layer::DenseConv(l) => dense_conv_forward(l, x, params),
            Layer::Relu => Ok(x.relu()),
            Layer::MaxPool2 => x.max_pool2(),
            Layer::Flatten => {
                let dims = x.dims();
                let flat: usize = dims[1..].iter().product();
                Ok(x.reshape(&[dims[0], flat]))
            }
            Layer::TTEmbedding(_) => Err(Error::Argument(
                "embedding layers are lookup-only and cannot sit in a forward chain".into(),
            )),
        }
    }
}

fn tt_kept_params(
    weights: &TTMatrix,
    mask_ids: &[MaskId],
    kept: &dyn Fn(MaskId) -> usize,
) -> usize {
    let d = weights.cores().len();
    let mut ranks = vec![1usize];
    ranks.extend(mask_ids.iter().map(|&id| kept(id)));
    ranks.push(1);
    debug_assert_eq!(ranks.len(), d + 1);
    (0..d)
        .map(|k| ranks[k] * weights.row_dims()[k] * weights.col_dims()[k] * ranks[k + 1])
        .sum()
}

fn conv_out_shape(
    in_shape: &[usize],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>> {
    if in_shape.len() != 3 || in_shape[0] != c_in {
        return Err(Error::Shape(format!(
            "conv expects ({c_in}, H, W), got {in_shape:?}"
        )));
    }
    let geom = ConvGeometry::new(
        &[1, c_in, in_shape[1], in_shape[2]],
        kernel,
        stride,
        padding,
    )?;
    Ok(vec![c_out, geom.out_height, geom.out_width])
}

/// Right-to-left TT chain contraction; never materializes the (M, N) matrix.
fn tt_linear_forward<'t>(
    layer: &TTLinearLayer,
    x: Var<'t>,
    params: &[Var<'t>],
    masks: Option<&[Var<'t>]>,
) -> Result<Var<'t>> {
    let d = layer.weights.cores().len();
    let cores = &params[..d];
    let bias = params[d];
    let xdims = x.dims();
    if xdims.len() != 2 || xdims[1] != layer.weights.ncols() {
        return Err(Error::Shape(format!(
            "TT linear expects (batch, {}), got {:?}",
            layer.weights.ncols(),
            xdims
        )));
    }
    if let Some(ms) = masks {
        if ms.len() != d - 1 {
            return Err(Error::Shape(format!(
                "TT linear with {d} cores needs {} masks, got {}",
                d - 1,
                ms.len()
            )));
        }
    }
    let batch = xdims[0];

    // z invariant entering iteration k: (B, n_0..n_k, r_k^out, T) with
    // T = prod of already-produced row factors.
    let mut dims0 = vec![batch];
    dims0.extend_from_slice(layer.weights.col_dims());
    dims0.push(1);
    dims0.push(1);
    let mut z = x.reshape(&dims0);

    for k in (0..d).rev() {
        z = z.contract(cores[k], &[k + 1, k + 2], &[2, 3]);
        // (B, n_0..n_{k-1}, T, r_k^in, m_k) -> (B, n_0..n_{k-1}, r_k^in, m_k, T)
        let mut perm: Vec<usize> = (0..=k).collect();
        perm.push(k + 2);
        perm.push(k + 3);
        perm.push(k + 1);
        z = z.permute(&perm);
        let zdims = z.dims();
        let mut merged = zdims[..k + 2].to_vec();
        merged.push(zdims[k + 2] * zdims[k + 3]);
        z = z.reshape(&merged);
        if k > 0 {
            if let Some(ms) = masks {
                z = z.hadamard_mode_k(ms[k - 1], k + 1);
            }
        }
    }
    Ok(z.reshape(&[batch, layer.weights.nrows()]).add_row(bias))
}

fn low_rank_forward<'t>(
    layer: &LowRankLinearLayer,
    x: Var<'t>,
    params: &[Var<'t>],
    masks: Option<&[Var<'t>]>,
) -> Result<Var<'t>> {
    let (u1, u2, bias) = (params[0], params[1], params[2]);
    let xdims = x.dims();
    if xdims.len() != 2 || xdims[1] != layer.weights.ncols() {
        return Err(Error::Shape(format!(
            "low-rank linear expects (batch, {}), got {:?}",
            layer.weights.ncols(),
            xdims
        )));
    }
    let mut z = x.matmul(u2.permute(&[1, 0]));
    if let Some(ms) = masks {
        z = z.hadamard_mode_k(ms[0], 1);
    }
    Ok(z.matmul(u1.permute(&[1, 0])).add_row(bias))
}

/// 1x1 conv down to r_1 channels, k x k conv, 1x1 conv up to C_out. Masks
/// scale the outputs of the first and second convolutions.
fn tucker2_conv_forward<'t>(
    layer: &Tucker2ConvLayer,
    x: Var<'t>,
    params: &[Var<'t>],
    masks: Option<&[Var<'t>]>,
) -> Result<Var<'t>> {
    let (core, u1, u2, bias) = (params[0], params[1], params[2], params[3]);
    let xdims = x.dims();
    let c_in = layer.weights.u1.dims()[0];
    let c_out = layer.weights.u2.dims()[0];
    let (r1, r2) = layer.weights.ranks();
    let kernel = layer.weights.core.dims()[2];
    if xdims.len() != 4 || xdims[1] != c_in {
        return Err(Error::Shape(format!(
            "Tucker-2 conv expects (batch, {c_in}, H, W), got {xdims:?}"
        )));
    }
    let batch = xdims[0];

    // 1x1 convolution: contract the channel mode with U1.
    let mut z = x.contract(u1, &[1], &[0]);
    if let Some(ms) = masks {
        z = z.hadamard_mode_k(ms[0], 3);
    }
    let z = z.permute(&[0, 3, 1, 2]);

    // k x k convolution on r_1 channels via im2col.
    let cols = z.im2col(kernel, layer.stride, layer.padding)?;
    let geom = ConvGeometry::new(&z.dims(), kernel, layer.stride, layer.padding)?;
    let kern = core.permute(&[0, 2, 3, 1]).reshape(&[r1 * kernel * kernel, r2]);
    let mut z = cols.matmul(kern);
    if let Some(ms) = masks {
        z = z.hadamard_mode_k(ms[1], 1);
    }

    // 1x1 convolution back up to C_out channels, then bias.
    let y = z.matmul(u2.permute(&[1, 0])).add_row(bias);
    Ok(y
        .reshape(&[batch, geom.out_height, geom.out_width, c_out])
        .permute(&[0, 3, 1, 2]))
}

fn dense_conv_forward<'t>(
    layer: &DenseConvLayer,
    x: Var<'t>,
    params: &[Var<'t>],
) -> Result<Var<'t>> {
    let (kernel_var, bias) = (params[0], params[1]);
    let kdims = layer.kernel.dims();
    let (c_in, c_out, k) = (kdims[0], kdims[1], kdims[2]);
    let xdims = x.dims();
    if xdims.len() != 4 || xdims[1] != c_in {
        return Err(Error::Shape(format!(
            "conv expects (batch, {c_in}, H, W), got {xdims:?}"
        )));
    }
    let batch = xdims[0];
    let cols = x.im2col(k, layer.stride, layer.padding)?;
    let geom = ConvGeometry::new(&xdims, k, layer.stride, layer.padding)?;
    let kern = kernel_var.permute(&[0, 2, 3, 1]).reshape(&[c_in * k * k, c_out]);
    let y = cols.matmul(kern).add_row(bias);
    Ok(y
        .reshape(&[batch, geom.out_height, geom.out_width, c_out])
        .permute(&[0, 3, 1, 2]))
}

impl TTEmbeddingLayer {
    /// Row `id` of the represented matrix, evaluated from the cores at the
    /// fixed row multi-index without reconstructing the table.
    pub fn lookup(&self, ids: &[usize]) -> Result<DenseTensor> {
        let vocab = self.weights.nrows();
        let width = self.weights.ncols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Argument(format!(
                "token id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let row_dims = self.weights.row_dims().to_vec();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            // Decompose the row index, most significant factor first.
            let mut rem = id;
            let mut multi = vec![0usize; row_dims.len()];
            for k in (0..row_dims.len()).rev() {
                multi[k] = rem % row_dims[k];
                rem /= row_dims[k];
            }
            let mut acc: Option<DenseTensor> = None;
            for (k, core) in self.weights.cores().iter().enumerate() {
                let slice = core.take(1, &[multi[k]])?; // (r_{k-1}, 1, n_k, r_k)
                let dims = slice.dims().to_vec();
                let slice = slice.reshape(&[dims[0], dims[2], dims[3]])?;
                acc = Some(match acc {
                    None => slice,
                    Some(a) => {
                        let last = a.ndim() - 1;
                        a.contract(&slice, &[last], &[0])?
                    }
                });
            }
            let row = acc.unwrap().reshape(&[width])?;
            out.extend_from_slice(row.data());
        }
        DenseTensor::new(vec![ids.len(), width], out)
    }
}
