//! Decomposition containers, initializers, reconstruction and parameter
//! counting.
//!
//! Four families are supported: Tensor Train chains over plain tensors,
//! TT-matrices (each core carries one row-factor/column-factor index pair),
//! Tucker-2 factorizations of convolution kernels, and two-factor low-rank
//! matrices. Models train these cores from scratch; there is no
//! decompose-a-pretrained-tensor path.

use crate::rng::Rng;
use crate::{DenseTensor, Error, Result};

/// Tensor Train chain: core `k` has dims `(r_{k-1}, n_k, r_k)` with boundary
/// ranks fixed at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TTDecomposition {
    cores: Vec<DenseTensor>,
}

impl TTDecomposition {
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Argument("TT chain needs at least one core".into()));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.ndim() != 3 {
                return Err(Error::Shape(format!(
                    "TT core {k} must be 3-way, got {:?}",
                    core.dims()
                )));
            }
        }
        if cores[0].dims()[0] != 1 || cores[cores.len() - 1].dims()[2] != 1 {
            return Err(Error::Shape("TT boundary ranks must equal 1".into()));
        }
        for k in 0..cores.len() - 1 {
            if cores[k].dims()[2] != cores[k + 1].dims()[0] {
                return Err(Error::Shape(format!(
                    "TT rank mismatch between cores {} and {}: {} vs {}",
                    k,
                    k + 1,
                    cores[k].dims()[2],
                    cores[k + 1].dims()[0]
                )));
            }
        }
        Ok(TTDecomposition { cores })
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    /// Full rank tuple `(r_0, ..., r_d)`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![self.cores[0].dims()[0]];
        ranks.extend(self.cores.iter().map(|c| c.dims()[2]));
        ranks
    }

    pub fn mode_dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dims()[1]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    /// Contract the chain left to right into the full tensor.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let mut acc = self.cores[0].clone();
        for core in &self.cores[1..] {
            let last = acc.ndim() - 1;
            acc = acc.contract(core, &[last], &[0])?;
        }
        acc.reshape(&self.mode_dims())
    }
}

/// Matrix in TT format: core `k` has dims `(r_{k-1}, m_k, n_k, r_k)` where
/// the represented matrix is `(prod m_k) x (prod n_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TTMatrix {
    cores: Vec<DenseTensor>,
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
}

impl TTMatrix {
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Argument("TT matrix needs at least one core".into()));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.ndim() != 4 {
                return Err(Error::Shape(format!(
                    "TT-matrix core {k} must be 4-way, got {:?}",
                    core.dims()
                )));
            }
        }
        if cores[0].dims()[0] != 1 || cores[cores.len() - 1].dims()[3] != 1 {
            return Err(Error::Shape("TT-matrix boundary ranks must equal 1".into()));
        }
        for k in 0..cores.len() - 1 {
            if cores[k].dims()[3] != cores[k + 1].dims()[0] {
                return Err(Error::Shape(format!(
                    "TT-matrix rank mismatch between cores {} and {}: {} vs {}",
                    k,
                    k + 1,
                    cores[k].dims()[3],
                    cores[k + 1].dims()[0]
                )));
            }
        }
        let row_dims = cores.iter().map(|c| c.dims()[1]).collect();
        let col_dims = cores.iter().map(|c| c.dims()[2]).collect();
        Ok(TTMatrix {
            cores,
            row_dims,
            col_dims,
        })
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    pub fn row_dims(&self) -> &[usize] {
        &self.row_dims
    }

    pub fn col_dims(&self) -> &[usize] {
        &self.col_dims
    }

    pub fn nrows(&self) -> usize {
        self.row_dims.iter().product()
    }

    pub fn ncols(&self) -> usize {
        self.col_dims.iter().product()
    }

    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![self.cores[0].dims()[0]];
        ranks.extend(self.cores.iter().map(|c| c.dims()[3]));
        ranks
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    /// Materialize the represented `(M, N)` matrix: contract the chain,
    /// interleave `(m_1, n_1, ..., m_d, n_d)` into `(m_1..m_d, n_1..n_d)`,
    /// then flatten.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let d = self.cores.len();
        let mut acc = self.cores[0].clone();
        for core in &self.cores[1..] {
            let last = acc.ndim() - 1;
            acc = acc.contract(core, &[last], &[0])?;
        }
        // acc dims: (1, m1, n1, m2, n2, ..., md, nd, 1)
        let mut interleaved = Vec::with_capacity(2 * d);
        for k in 0..d {
            interleaved.push(self.row_dims[k]);
            interleaved.push(self.col_dims[k]);
        }
        let acc = acc.reshape(&interleaved)?;
        let mut perm = Vec::with_capacity(2 * d);
        perm.extend((0..d).map(|k| 2 * k));
        perm.extend((0..d).map(|k| 2 * k + 1));
        acc.permute(&perm)?.reshape(&[self.nrows(), self.ncols()])
    }
}

/// Partial Tucker factorization of a `(C_in, C_out, k, k)` convolution
/// kernel into a `(r_1, r_2, k, k)` core and two factor matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tucker2 {
    pub core: DenseTensor,
    pub u1: DenseTensor,
    pub u2: DenseTensor,
}

impl Tucker2 {
    pub fn new(core: DenseTensor, u1: DenseTensor, u2: DenseTensor) -> Result<Self> {
        if core.ndim() != 4 {
            return Err(Error::Shape(format!(
                "Tucker-2 core must be 4-way, got {:?}",
                core.dims()
            )));
        }
        if u1.ndim() != 2 || u2.ndim() != 2 {
            return Err(Error::Shape("Tucker-2 factors must be matrices".into()));
        }
        if u1.dims()[1] != core.dims()[0] || u2.dims()[1] != core.dims()[1] {
            return Err(Error::Shape(format!(
                "Tucker-2 rank mismatch: core {:?} vs U1 {:?}, U2 {:?}",
                core.dims(),
                u1.dims(),
                u2.dims()
            )));
        }
        Ok(Tucker2 { core, u1, u2 })
    }

    /// `(r_1, r_2)`.
    pub fn ranks(&self) -> (usize, usize) {
        (self.core.dims()[0], self.core.dims()[1])
    }

    pub fn param_count(&self) -> usize {
        self.core.len() + self.u1.len() + self.u2.len()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        self.core
            .mode_k_product(&self.u1, 0)?
            .mode_k_product(&self.u2, 1)
    }
}

/// Two-factor matrix `W = U1 U2` with `U1 (M, r)` and `U2 (r, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankMatrix {
    pub u1: DenseTensor,
    pub u2: DenseTensor,
}

impl LowRankMatrix {
    pub fn new(u1: DenseTensor, u2: DenseTensor) -> Result<Self> {
        if u1.ndim() != 2 || u2.ndim() != 2 {
            return Err(Error::Shape("low-rank factors must be matrices".into()));
        }
        if u1.dims()[1] != u2.dims()[0] {
            return Err(Error::Shape(format!(
                "low-rank inner dims disagree: {:?} vs {:?}",
                u1.dims(),
                u2.dims()
            )));
        }
        Ok(LowRankMatrix { u1, u2 })
    }

    pub fn rank(&self) -> usize {
        self.u1.dims()[1]
    }

    pub fn nrows(&self) -> usize {
        self.u1.dims()[0]
    }

    pub fn ncols(&self) -> usize {
        self.u2.dims()[1]
    }

    pub fn param_count(&self) -> usize {
        self.u1.len() + self.u2.len()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        self.u1.matmul(&self.u2)
    }
}

/// Dense parameters divided by decomposed parameters.
pub fn compression_ratio(dense_params: usize, dec_params: usize) -> Result<f64> {
    if dec_params == 0 {
        return Err(Error::Argument(
            "compression ratio undefined for zero decomposed parameters".into(),
        ));
    }
    Ok(dense_params as f64 / dec_params as f64)
}

/// Per-core standard deviation that makes the reconstructed entries match a
/// Glorot-style target variance. Entry variance of a TT chain with i.i.d.
/// zero-mean cores is `prod(interior ranks) * sigma^(2d)`, so
/// `sigma = (target / prod r)^(1/(2d))`.
fn tt_core_std(target_var: f64, interior_ranks: &[usize], depth: usize) -> f64 {
    let rank_product: f64 = interior_ranks.iter().map(|&r| r as f64).product();
    (target_var / rank_product).powf(1.0 / (2.0 * depth as f64))
}

fn fill_normal(dims: &[usize], std: f64, rng: &mut Rng) -> DenseTensor {
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.normal_with(0.0, std)).collect();
    DenseTensor::new(dims.to_vec(), data).unwrap()
}

fn fill_uniform(dims: &[usize], bound: f64, rng: &mut Rng) -> DenseTensor {
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.uniform_in(-bound, bound)).collect();
    DenseTensor::new(dims.to_vec(), data).unwrap()
}

fn check_shape_spec(dims: &[usize], ranks: &[usize], what: &str) -> Result<()> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::Argument(format!("{what}: bad mode dims {dims:?}")));
    }
    if ranks.len() + 1 != dims.len() {
        return Err(Error::Argument(format!(
            "{what}: {} interior ranks for {} modes",
            ranks.len(),
            dims.len()
        )));
    }
    if ranks.iter().any(|&r| r == 0) {
        return Err(Error::Argument(format!("{what}: zero rank in {ranks:?}")));
    }
    Ok(())
}

/// Glorot-style TT chain over a plain tensor; targets entry variance
/// `1 / sqrt(prod dims)`.
pub fn init_glorot_tt(
    dims: &[usize],
    interior_ranks: &[usize],
    rng: &mut Rng,
) -> Result<TTDecomposition> {
    check_shape_spec(dims, interior_ranks, "glorot TT")?;
    let total: f64 = dims.iter().map(|&n| n as f64).product();
    let target_var = 1.0 / total.sqrt();
    let std = tt_core_std(target_var, interior_ranks, dims.len());
    let mut full_ranks = vec![1usize];
    full_ranks.extend_from_slice(interior_ranks);
    full_ranks.push(1);
    let cores = dims
        .iter()
        .enumerate()
        .map(|(k, &n)| fill_normal(&[full_ranks[k], n, full_ranks[k + 1]], std, rng))
        .collect();
    TTDecomposition::new(cores)
}

/// Glorot-style TT matrix; targets entry variance `2 / (M + N)`.
pub fn init_glorot_tt_matrix(
    row_dims: &[usize],
    col_dims: &[usize],
    interior_ranks: &[usize],
    rng: &mut Rng,
) -> Result<TTMatrix> {
    if row_dims.len() != col_dims.len() {
        return Err(Error::Argument(format!(
            "row factors {row_dims:?} and column factors {col_dims:?} differ in length"
        )));
    }
    check_shape_spec(row_dims, interior_ranks, "glorot TT matrix")?;
    check_shape_spec(col_dims, interior_ranks, "glorot TT matrix")?;
    let m: f64 = row_dims.iter().map(|&x| x as f64).product();
    let n: f64 = col_dims.iter().map(|&x| x as f64).product();
    let target_var = 2.0 / (m + n);
    let std = tt_core_std(target_var, interior_ranks, row_dims.len());
    let mut full_ranks = vec![1usize];
    full_ranks.extend_from_slice(interior_ranks);
    full_ranks.push(1);
    let cores = row_dims
        .iter()
        .zip(col_dims)
        .enumerate()
        .map(|(k, (&mk, &nk))| fill_normal(&[full_ranks[k], mk, nk, full_ranks[k + 1]], std, rng))
        .collect();
    TTMatrix::new(cores)
}

/// Kaiming-uniform bound `sqrt(6 / fan_in)`.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_kaiming_tucker2(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    r1: usize,
    r2: usize,
    rng: &mut Rng,
) -> Result<Tucker2> {
    if [c_in, c_out, kernel, r1, r2].iter().any(|&x| x == 0) {
        return Err(Error::Argument("Tucker-2 shape components must be positive".into()));
    }
    let core = fill_uniform(
        &[r1, r2, kernel, kernel],
        kaiming_bound(r1 * kernel * kernel),
        rng,
    );
    let u1 = fill_uniform(&[c_in, r1], kaiming_bound(c_in), rng);
    let u2 = fill_uniform(&[c_out, r2], kaiming_bound(r2), rng);
    Tucker2::new(core, u1, u2)
}

pub fn init_kaiming_low_rank(
    rows: usize,
    cols: usize,
    rank: usize,
    rng: &mut Rng,
) -> Result<LowRankMatrix> {
    if rows == 0 || cols == 0 || rank == 0 {
        return Err(Error::Argument("low-rank shape components must be positive".into()));
    }
    let u1 = fill_uniform(&[rows, rank], kaiming_bound(rank), rng);
    let u2 = fill_uniform(&[rank, cols], kaiming_bound(cols), rng);
    LowRankMatrix::new(u1, u2)
}

/// Dense `(rows, cols)` weight matrix mapping `cols` inputs to `rows` outputs.
pub fn init_kaiming_dense(rows: usize, cols: usize, rng: &mut Rng) -> Result<DenseTensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("dense shape components must be positive".into()));
    }
    Ok(fill_uniform(&[rows, cols], kaiming_bound(cols), rng))
}

/// Dense `(C_in, C_out, k, k)` convolution kernel.
pub fn init_kaiming_conv(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut Rng,
) -> Result<DenseTensor> {
    if c_in == 0 || c_out == 0 || kernel == 0 {
        return Err(Error::Argument("conv shape components must be positive".into()));
    }
    Ok(fill_uniform(
        &[c_in, c_out, kernel, kernel],
        kaiming_bound(c_in * kernel * kernel),
        rng,
    ))
}
