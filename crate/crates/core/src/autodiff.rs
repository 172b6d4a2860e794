//! Tape-based reverse-mode differentiation over [`DenseTensor`] values.
//!
//! A [`Tape`] records every operation during the forward pass; [`Var`]s are
//! cheap copyable handles into it. [`Var::backward`] walks the tape in
//! reverse, accumulating gradients additively, and returns a [`GradMap`]
//! keyed by node. Tapes are single-threaded and rebuilt from scratch for
//! every optimizer step; backward never mutates the tape, so repeated calls
//! yield bit-identical gradients.

use std::cell::RefCell;

use crate::tensor::kernels;
use crate::{DenseTensor, Error, Result};

/// Domain floor for `log` and `div`, keeping mask probabilities near 0/1
/// from poisoning training with infinities.
pub const DOMAIN_EPS: f64 = 1e-12;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: DenseTensor,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Relu(usize),
    Sum(usize),
    AddRow(usize, usize),
    HadamardModeK(usize, usize, usize),
    Im2Col {
        input: usize,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    SoftmaxCeSum {
        logits: usize,
        labels: Vec<usize>,
        probs: DenseTensor,
    },
}

/// Spatial bookkeeping shared by im2col forward and its scatter backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input_dims: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_dims.len() != 4 {
            return Err(Error::Shape(format!(
                "im2col expects (batch, channels, height, width), got {input_dims:?}"
            )));
        }
        let (batch, channels, height, width) =
            (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
        if stride == 0 {
            return Err(Error::Argument("stride must be positive".into()));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::Shape(format!(
                "kernel {kernel} larger than padded input {height}x{width} (pad {padding})"
            )));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct GradMap {
    grads: Vec<Option<DenseTensor>>,
}

impl GradMap {
    /// Gradient of the root with respect to `var`; `None` if the node does
    /// not influence the root (gradient identically zero).
    pub fn get(&self, var: Var<'_>) -> Option<&DenseTensor> {
        self.grads[var.idx].as_ref()
    }

    /// Like [`GradMap::get`], but materializes a zero tensor of the given
    /// dims when the gradient is absent.
    pub fn get_or_zeros(&self, var: Var<'_>, dims: &[usize]) -> DenseTensor {
        match self.grads[var.idx].as_ref() {
            Some(g) => g.clone(),
            None => DenseTensor::zeros(dims),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a differentiable input node.
    pub fn leaf(&self, value: DenseTensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Record a non-trained input; identical to a leaf except in intent.
    pub fn constant(&self, value: DenseTensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: DenseTensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&DenseTensor) -> R) -> R {
        f(&self.nodes.borrow()[idx].value)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> DenseTensor {
        self.tape.with_value(self.idx, |v| v.clone())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.with_value(self.idx, |v| v.dims().to_vec())
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.with_value(self.idx, |v| {
            assert!(v.is_scalar(), "scalar_value on dims {:?}", v.dims());
            v.data()[0]
        })
    }

    fn same_tape(&self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(self, value: DenseTensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self
            .tape
            .with_value(self.idx, |a| {
                self.tape.with_value(other.idx, |b| a.add(b))
            })
            .expect("add: shape mismatch");
        self.unary(value, Op::Add(self.idx, other.idx))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self
            .tape
            .with_value(self.idx, |a| {
                self.tape.with_value(other.idx, |b| a.sub(b))
            })
            .expect("sub: shape mismatch");
        self.unary(value, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self
            .tape
            .with_value(self.idx, |a| {
                self.tape.with_value(other.idx, |b| a.mul(b))
            })
            .expect("mul: shape mismatch");
        self.unary(value, Op::Mul(self.idx, other.idx))
    }

    /// Elementwise division with the denominator magnitude floored at
    /// [`DOMAIN_EPS`]. Errors on non-finite operands.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                if a.data().iter().chain(b.data()).any(|x| !x.is_finite()) {
                    return Err(Error::Argument("non-finite operand in div".into()));
                }
                a.zip_with(b, |x, y| x / guard_denominator(y))
            })
        })?;
        Ok(self.unary(value, Op::Div(self.idx, other.idx)))
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.scale(-1.0));
        self.unary(value, Op::Neg(self.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.scale(c));
        self.unary(value, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.map(|x| x + c));
        self.unary(value, Op::AddScalar(self.idx))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self
            .tape
            .with_value(self.idx, |a| {
                self.tape.with_value(other.idx, |b| a.matmul(b))
            })
            .expect("matmul: incompatible shapes");
        self.unary(value, Op::MatMul(self.idx, other.idx))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let value = self
            .tape
            .with_value(self.idx, |a| a.permute(perm))
            .expect("permute: invalid permutation");
        self.unary(value, Op::Permute(self.idx, perm.to_vec()))
    }

    pub fn reshape(self, new_dims: &[usize]) -> Var<'t> {
        let value = self
            .tape
            .with_value(self.idx, |a| a.reshape(new_dims))
            .expect("reshape: element count mismatch");
        self.unary(value, Op::Reshape(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.map(sigmoid));
        self.unary(value, Op::Sigmoid(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.map(f64::exp));
        self.unary(value, Op::Exp(self.idx))
    }

    /// Natural log with the argument floored at [`DOMAIN_EPS`]. Errors on
    /// non-finite input.
    pub fn log(self) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.idx, |a| {
            if a.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Argument("non-finite input to log".into()));
            }
            Ok(a.map(|x| x.max(DOMAIN_EPS).ln()))
        })?;
        Ok(self.unary(value, Op::Log(self.idx)))
    }

    /// Elementwise clamp to `[lo, hi]` with pass-through subgradient inside
    /// the interval (inclusive at both ends).
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if !(lo < hi) {
            return Err(Error::Argument(format!("clamp needs lo < hi, got [{lo}, {hi}]")));
        }
        let value = self
            .tape
            .with_value(self.idx, |a| a.map(|x| x.clamp(lo, hi)));
        Ok(self.unary(value, Op::Clamp(self.idx, lo, hi)))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| a.map(|x| x.max(0.0)));
        self.unary(value, Op::Relu(self.idx))
    }

    /// Sum of all elements; yields a scalar node.
    pub fn sum(self) -> Var<'t> {
        let value = self.tape.with_value(self.idx, |a| DenseTensor::scalar(a.sum()));
        self.unary(value, Op::Sum(self.idx))
    }

    /// Add a length-C vector to every row of a (R, C) matrix.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(bias);
        let value = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(bias.idx, |b| {
                assert_eq!(a.ndim(), 2, "add_row lhs must be 2-D");
                assert_eq!(
                    a.dims()[1],
                    b.len(),
                    "add_row: {} columns vs bias length {}",
                    a.dims()[1],
                    b.len()
                );
                kernels::add_flops(a.len() as u64);
                let cols = a.dims()[1];
                let mut data = a.data().to_vec();
                for row in data.chunks_exact_mut(cols) {
                    for (x, &bv) in row.iter_mut().zip(b.data()) {
                        *x += bv;
                    }
                }
                DenseTensor::new(a.dims().to_vec(), data).unwrap()
            })
        });
        self.unary(value, Op::AddRow(self.idx, bias.idx))
    }

    /// Broadcast Hadamard product along mode `k` with a differentiable
    /// weight vector.
    pub fn hadamard_mode_k(self, weights: Var<'t>, k: usize) -> Var<'t> {
        self.same_tape(weights);
        let value = self
            .tape
            .with_value(self.idx, |a| {
                self.tape
                    .with_value(weights.idx, |w| a.mode_k_hadamard(w.data(), k))
            })
            .expect("hadamard_mode_k: shape mismatch");
        self.unary(value, Op::HadamardModeK(self.idx, weights.idx, k))
    }

    /// Unfold (batch, C, H, W) into the (batch*OH*OW, C*k*k) patch matrix.
    pub fn im2col(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (value, geom) = self.tape.with_value(self.idx, |a| {
            let geom = ConvGeometry::new(a.dims(), kernel, stride, padding)?;
            Ok::<_, Error>((im2col_forward(a, &geom), geom))
        })?;
        Ok(self.unary(value, Op::Im2Col { input: self.idx, geom }))
    }

    /// 2x2 max pooling with stride 2 over (batch, C, H, W).
    pub fn max_pool2(self) -> Result<Var<'t>> {
        let (value, argmax) = self.tape.with_value(self.idx, |a| {
            let dims = a.dims();
            if dims.len() != 4 || dims[2] % 2 != 0 || dims[3] % 2 != 0 {
                return Err(Error::Shape(format!(
                    "max_pool2 expects (batch, C, even H, even W), got {dims:?}"
                )));
            }
            Ok(max_pool2_forward(a))
        })?;
        Ok(self.unary(value, Op::MaxPool2 { input: self.idx, argmax }))
    }

    /// Summed softmax cross-entropy over rows of a (batch, classes) logits
    /// matrix: `sum_b [logsumexp(row_b) - row_b[label_b]]`.
    pub fn softmax_cross_entropy_sum(self, labels: &[usize]) -> Result<Var<'t>> {
        let (value, probs) = self.tape.with_value(self.idx, |a| {
            let dims = a.dims();
            if dims.len() != 2 || dims[0] != labels.len() {
                return Err(Error::Shape(format!(
                    "cross-entropy: logits {dims:?} vs {} labels",
                    labels.len()
                )));
            }
            let classes = dims[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Argument(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            let mut probs = vec![0.0; a.len()];
            let mut total = 0.0;
            for (b, row) in a.data().chunks_exact(classes).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &x in row {
                    z += (x - max).exp();
                }
                let log_z = max + z.ln();
                total += log_z - row[labels[b]];
                for (j, &x) in row.iter().enumerate() {
                    probs[b * classes + j] = (x - max).exp() / z;
                }
            }
            Ok((
                DenseTensor::scalar(total),
                DenseTensor::new(dims.to_vec(), probs).unwrap(),
            ))
        })?;
        Ok(self.unary(
            value,
            Op::SoftmaxCeSum {
                logits: self.idx,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// General contraction assembled from permute/reshape/matmul, mirroring
    /// [`DenseTensor::contract`] semantics.
    pub fn contract(self, other: Var<'t>, modes_a: &[usize], modes_b: &[usize]) -> Var<'t> {
        self.same_tape(other);
        let a_dims = self.dims();
        let b_dims = other.dims();
        let keep_a: Vec<usize> = (0..a_dims.len()).filter(|m| !modes_a.contains(m)).collect();
        let keep_b: Vec<usize> = (0..b_dims.len()).filter(|m| !modes_b.contains(m)).collect();

        let mut perm_a = keep_a.clone();
        perm_a.extend_from_slice(modes_a);
        let mut perm_b = modes_b.to_vec();
        perm_b.extend_from_slice(&keep_b);

        let m: usize = keep_a.iter().map(|&ax| a_dims[ax]).product();
        let c: usize = modes_a.iter().map(|&ax| a_dims[ax]).product();
        let n: usize = keep_b.iter().map(|&ax| b_dims[ax]).product();

        let lhs = self.permute(&perm_a).reshape(&[m.max(1), c]);
        let rhs = other.permute(&perm_b).reshape(&[c, n.max(1)]);
        let prod = lhs.matmul(rhs);

        let mut out_dims: Vec<usize> = keep_a.iter().map(|&ax| a_dims[ax]).collect();
        out_dims.extend(keep_b.iter().map(|&ax| b_dims[ax]));
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        prod.reshape(&out_dims)
    }

    /// Reverse-mode pass from a scalar root. Returns the gradient of the
    /// root with respect to every node it reaches.
    pub fn backward(self) -> Result<GradMap> {
        let nodes = self.tape.nodes.borrow();
        if !nodes[self.idx].value.is_scalar() {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got dims {:?}",
                nodes[self.idx].value.dims()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; nodes.len()];
        grads[self.idx] = Some(DenseTensor::scalar(1.0));

        for idx in (0..=self.idx).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            match &nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(go);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = go.mul(&nodes[*b].value).unwrap();
                    let gb = go.mul(&nodes[*a].value).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let ga = go.zip_with(vb, |g, y| g / guard_denominator(y)).unwrap();
                    let gb = go
                        .zip_with(va, |g, x| g * x)
                        .unwrap()
                        .zip_with(vb, |gx, y| {
                            let d = guard_denominator(y);
                            -gx / (d * d)
                        })
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, go.scale(-1.0)),
                Op::Scale(a, c) => accumulate(&mut grads, *a, go.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, go),
                Op::MatMul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let ga = go.matmul(&vb.transpose().unwrap()).unwrap();
                    let gb = va.transpose().unwrap().matmul(&go).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    accumulate(&mut grads, *a, go.permute(&inverse).unwrap());
                }
                Op::Reshape(a) => {
                    let parent_dims = nodes[*a].value.dims().to_vec();
                    accumulate(&mut grads, *a, go.reshape(&parent_dims).unwrap());
                }
                Op::Sigmoid(a) => {
                    let s = &nodes[idx].value;
                    let ga = go.zip_with(s, |g, y| g * y * (1.0 - y)).unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = go.mul(&nodes[idx].value).unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = go
                        .zip_with(&nodes[*a].value, |g, x| g / x.max(DOMAIN_EPS))
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = go
                        .zip_with(&nodes[*a].value, |g, x| {
                            if x >= *lo && x <= *hi {
                                g
                            } else {
                                0.0
                            }
                        })
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = go
                        .zip_with(&nodes[*a].value, |g, x| if x > 0.0 { g } else { 0.0 })
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let g = go.data()[0];
                    let dims = nodes[*a].value.dims().to_vec();
                    accumulate(&mut grads, *a, DenseTensor::filled(&dims, g));
                }
                Op::AddRow(a, bias) => {
                    let cols = nodes[idx].value.dims()[1];
                    let mut gb = vec![0.0; cols];
                    for row in go.data().chunks_exact(cols) {
                        for (acc, &g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    let bias_dims = nodes[*bias].value.dims().to_vec();
                    accumulate(
                        &mut grads,
                        *bias,
                        DenseTensor::new(bias_dims, gb).unwrap(),
                    );
                    accumulate(&mut grads, *a, go);
                }
                Op::HadamardModeK(a, w, k) => {
                    let va = &nodes[*a].value;
                    let vw = &nodes[*w].value;
                    let ga = go.mode_k_hadamard(vw.data(), *k).unwrap();
                    let gw = hadamard_weight_grad(&go, va, *k, vw.dims());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Im2Col { input, geom } => {
                    let ga = col2im_backward(&go, geom);
                    accumulate(&mut grads, *input, ga);
                }
                Op::MaxPool2 { input, argmax } => {
                    let dims = nodes[*input].value.dims().to_vec();
                    let mut data = vec![0.0; dims.iter().product()];
                    for (&src, &g) in argmax.iter().zip(go.data()) {
                        data[src] += g;
                    }
                    accumulate(&mut grads, *input, DenseTensor::new(dims, data).unwrap());
                }
                Op::SoftmaxCeSum {
                    logits,
                    labels,
                    probs,
                } => {
                    let g = go.data()[0];
                    let classes = probs.dims()[1];
                    let mut data = probs.data().to_vec();
                    for (b, row) in data.chunks_exact_mut(classes).enumerate() {
                        row[labels[b]] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= g;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        DenseTensor::new(probs.dims().to_vec(), data).unwrap(),
                    );
                }
            }
        }
        Ok(GradMap { grads })
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], idx: usize, delta: DenseTensor) {
    match &mut grads[idx] {
        Some(g) => *g = g.add(&delta).expect("gradient dims must match value dims"),
        slot @ None => *slot = Some(delta),
    }
}

fn guard_denominator(y: f64) -> f64 {
    if y.abs() >= DOMAIN_EPS {
        y
    } else if y.is_sign_negative() {
        -DOMAIN_EPS
    } else {
        DOMAIN_EPS
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col_forward(input: &DenseTensor, geom: &ConvGeometry) -> DenseTensor {
    let ConvGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
        out_height,
        out_width,
    } = *geom;
    let rows = batch * out_height * out_width;
    let cols = channels * kernel * kernel;
    let x = input.data();
    let mut out = vec![0.0; rows * cols];
    let mut row = 0;
    for b in 0..batch {
        for oi in 0..out_height {
            for oj in 0..out_width {
                let dst = &mut out[row * cols..(row + 1) * cols];
                let mut col = 0;
                for c in 0..channels {
                    let plane = (b * channels + c) * height * width;
                    for ki in 0..kernel {
                        let i = (oi * stride + ki) as isize - padding as isize;
                        for kj in 0..kernel {
                            let j = (oj * stride + kj) as isize - padding as isize;
                            if i >= 0 && (i as usize) < height && j >= 0 && (j as usize) < width {
                                dst[col] = x[plane + i as usize * width + j as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    DenseTensor::new(vec![rows, cols], out).unwrap()
}

fn col2im_backward(go: &DenseTensor, geom: &ConvGeometry) -> DenseTensor {
    let ConvGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
        out_height,
        out_width,
    } = *geom;
    let cols = channels * kernel * kernel;
    let mut out = vec![0.0; batch * channels * height * width];
    let g = go.data();
    let mut row = 0;
    for b in 0..batch {
        for oi in 0..out_height {
            for oj in 0..out_width {
                let src = &g[row * cols..(row + 1) * cols];
                let mut col = 0;
                for c in 0..channels {
                    let plane = (b * channels + c) * height * width;
                    for ki in 0..kernel {
                        let i = (oi * stride + ki) as isize - padding as isize;
                        for kj in 0..kernel {
                            let j = (oj * stride + kj) as isize - padding as isize;
                            if i >= 0 && (i as usize) < height && j >= 0 && (j as usize) < width {
                                out[plane + i as usize * width + j as usize] += src[col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    DenseTensor::new(vec![batch, channels, height, width], out).unwrap()
}

fn max_pool2_forward(input: &DenseTensor) -> (DenseTensor, Vec<usize>) {
    let dims = input.dims();
    let (batch, channels, height, width) = (dims[0], dims[1], dims[2], dims[3]);
    let (oh, ow) = (height / 2, width / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for bc in 0..batch * channels {
        let plane = bc * height * width;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best_idx = plane + (2 * oi) * width + 2 * oj;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = plane + (2 * oi + di) * width + 2 * oj + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (
        DenseTensor::new(vec![batch, channels, oh, ow], out).unwrap(),
        argmax,
    )
}

fn hadamard_weight_grad(
    go: &DenseTensor,
    a: &DenseTensor,
    k: usize,
    weight_dims: &[usize],
) -> DenseTensor {
    let dims = a.dims();
    let inner: usize = dims[k + 1..].iter().product();
    let mid = dims[k];
    let mut gw = vec![0.0; mid];
    let (gd, ad) = (go.data(), a.data());
    for (block_g, block_a) in gd
        .chunks_exact(mid * inner)
        .zip(ad.chunks_exact(mid * inner))
    {
        for s in 0..mid {
            let mut acc = 0.0;
            for t in 0..inner {
                acc += block_g[s * inner + t] * block_a[s * inner + t];
            }
            gw[s] += acc;
        }
    }
    DenseTensor::new(weight_dims.to_vec(), gw).unwrap()
}
