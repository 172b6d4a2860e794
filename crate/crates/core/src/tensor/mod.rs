//! Dense multidimensional arrays and the three products the rest of the
//! crate is built from: general contraction, mode-k product, and mode-k
//! broadcast Hadamard product.
//!
//! Layout is row-major with 0-based indices. All operations are pure; a
//! tensor is an immutable value once built.

pub mod kernels;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Argument("tensor needs at least one mode".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("zero-sized mode in dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                len,
                data.len()
            )));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::filled(dims, 1.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        DenseTensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for ax in (0..dims.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        DenseTensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for a single-element tensor of any rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for ax in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * self.dims[ax + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut flat = 0;
        for (ax, &i) in index.iter().enumerate() {
            debug_assert!(i < self.dims[ax]);
            flat = flat * self.dims[ax] + i;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    /// Same elements, new dims; row-major order is preserved.
    pub fn reshape(&self, new_dims: &[usize]) -> Result<Self> {
        let len: usize = new_dims.iter().product();
        if new_dims.is_empty() || new_dims.iter().any(|&d| d == 0) || len != self.data.len() {
            return Err(Error::Argument(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.dims,
                self.data.len(),
                new_dims
            )));
        }
        Ok(DenseTensor {
            dims: new_dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorder modes: output mode `i` is input mode `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let d = self.dims.len();
        let mut seen = vec![false; d];
        let valid = perm.len() == d
            && perm.iter().all(|&p| {
                if p >= d || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::Argument(format!(
                "invalid permutation {:?} for {} modes",
                perm, d
            )));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let out_src_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; d];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for ax in (0..d).rev() {
                idx[ax] += 1;
                src += out_src_strides[ax];
                if idx[ax] < out_dims[ax] {
                    break;
                }
                idx[ax] = 0;
                src -= out_dims[ax] * out_src_strides[ax];
            }
        }
        Ok(DenseTensor {
            dims: out_dims,
            data: out,
        })
    }

    /// Contraction over the paired mode lists. The result carries this
    /// tensor's non-contracted modes (in original order) followed by
    /// `other`'s non-contracted modes (in original order).
    pub fn contract(
        &self,
        other: &DenseTensor,
        modes_a: &[usize],
        modes_b: &[usize],
    ) -> Result<Self> {
        if modes_a.is_empty() || modes_a.len() != modes_b.len() {
            return Err(Error::Argument(format!(
                "contraction needs equal non-empty mode lists, got {} and {}",
                modes_a.len(),
                modes_b.len()
            )));
        }
        check_unique(modes_a, self.ndim(), "lhs")?;
        check_unique(modes_b, other.ndim(), "rhs")?;
        for (&ma, &mb) in modes_a.iter().zip(modes_b) {
            if self.dims[ma] != other.dims[mb] {
                return Err(Error::Shape(format!(
                    "contracted mode {} of lhs (dim {}) does not match mode {} of rhs (dim {})",
                    ma, self.dims[ma], mb, other.dims[mb]
                )));
            }
        }

        let keep_a: Vec<usize> = (0..self.ndim()).filter(|m| !modes_a.contains(m)).collect();
        let keep_b: Vec<usize> = (0..other.ndim()).filter(|m| !modes_b.contains(m)).collect();

        let mut perm_a = keep_a.clone();
        perm_a.extend_from_slice(modes_a);
        let mut perm_b = modes_b.to_vec();
        perm_b.extend_from_slice(&keep_b);

        let a = self.permute(&perm_a)?;
        let b = other.permute(&perm_b)?;

        let m: usize = keep_a.iter().map(|&ax| self.dims[ax]).product();
        let c: usize = modes_a.iter().map(|&ax| self.dims[ax]).product();
        let n: usize = keep_b.iter().map(|&ax| other.dims[ax]).product();

        let out = kernels::matmul(a.data(), b.data(), m, c, n);

        let mut out_dims: Vec<usize> = keep_a.iter().map(|&ax| self.dims[ax]).collect();
        out_dims.extend(keep_b.iter().map(|&ax| other.dims[ax]));
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        DenseTensor::new(out_dims, out)
    }

    /// Mode-k product with a matrix `B` of dims `(m_k, n_k)`; replaces this
    /// tensor's mode `k` (of dim `n_k`) with `m_k`.
    pub fn mode_k_product(&self, matrix: &DenseTensor, k: usize) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::Argument(format!(
                "mode-k product needs a matrix, got {} modes",
                matrix.ndim()
            )));
        }
        if k >= self.ndim() {
            return Err(Error::Argument(format!(
                "mode {} out of range for {} modes",
                k,
                self.ndim()
            )));
        }
        if matrix.dims()[1] != self.dims[k] {
            return Err(Error::Shape(format!(
                "mode-{} product: tensor dim {} vs matrix columns {}",
                k,
                self.dims[k],
                matrix.dims()[1]
            )));
        }
        let contracted = self.contract(matrix, &[k], &[1])?;
        // The new mode sits last; move it back to position k.
        let d = contracted.ndim();
        let mut perm: Vec<usize> = (0..d - 1).collect();
        perm.insert(k, d - 1);
        contracted.permute(&perm)
    }

    /// Broadcast Hadamard product along mode `k`: element `(i_1,...,i_d)`
    /// is scaled by `weights[i_k]`.
    pub fn mode_k_hadamard(&self, weights: &[f64], k: usize) -> Result<Self> {
        if k >= self.ndim() {
            return Err(Error::Argument(format!(
                "mode {} out of range for {} modes",
                k,
                self.ndim()
            )));
        }
        if weights.len() != self.dims[k] {
            return Err(Error::Shape(format!(
                "mode-{} hadamard: tensor dim {} vs vector length {}",
                k,
                self.dims[k],
                weights.len()
            )));
        }
        let inner: usize = self.dims[k + 1..].iter().product();
        let mid = self.dims[k];
        let mut out = self.data.clone();
        kernels::add_flops(out.len() as u64);
        for block in out.chunks_exact_mut(mid * inner) {
            for (s, seg) in block.chunks_exact_mut(inner).enumerate() {
                let w = weights[s];
                for x in seg {
                    *x *= w;
                }
            }
        }
        DenseTensor::new(self.dims.clone(), out)
    }

    /// 2-D matrix product helper.
    pub fn matmul(&self, other: &DenseTensor) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::Argument("matmul expects 2-D tensors".into()));
        }
        self.contract(other, &[1], &[0])
    }

    /// 2-D transpose helper.
    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Argument("transpose expects a 2-D tensor".into()));
        }
        self.permute(&[1, 0])
    }

    /// Keep only `indices` (in the given order) along `axis`.
    pub fn take(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::Argument(format!(
                "axis {} out of range for {} modes",
                axis,
                self.ndim()
            )));
        }
        if indices.is_empty() {
            return Err(Error::Argument("cannot take an empty index set".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dims[axis]) {
            return Err(Error::Argument(format!(
                "index {} out of range for axis {} (dim {})",
                bad, axis, self.dims[axis]
            )));
        }
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mid = self.dims[axis];
        let outer: usize = self.dims[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * mid * inner;
            for &s in indices {
                out.extend_from_slice(&self.data[base + s * inner..base + (s + 1) * inner]);
            }
        }
        let mut dims = self.dims.clone();
        dims[axis] = indices.len();
        DenseTensor::new(dims, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(DenseTensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_with(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_with(other, |x, y| x - y)
    }

    pub fn mul(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_with(other, |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn iter_indices(&self) -> IndexIter {
        IndexIter {
            dims: self.dims.clone(),
            next: Some(vec![0; self.dims.len()]),
        }
    }
}

/// Row-major iterator over all multi-indices of a dim tuple.
pub struct IndexIter {
    dims: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl Iterator for IndexIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for ax in (0..self.dims.len()).rev() {
            succ[ax] += 1;
            if succ[ax] < self.dims[ax] {
                self.next = Some(succ);
                return Some(current);
            }
            succ[ax] = 0;
        }
        self.next = None;
        Some(current)
    }
}

fn check_unique(modes: &[usize], ndim: usize, side: &str) -> Result<()> {
    let mut seen = vec![false; ndim];
    for &m in modes {
        if m >= ndim {
            return Err(Error::Argument(format!(
                "{side} mode {m} out of range for {ndim} modes"
            )));
        }
        if seen[m] {
            return Err(Error::Argument(format!("duplicate {side} mode {m}")));
        }
        seen[m] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_2x3() -> DenseTensor {
        DenseTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(DenseTensor::new(vec![], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matrix_product_via_contract() {
        let a = tensor_2x3();
        let b = DenseTensor::from_fn(&[3, 4], |i| (i[0] * 4 + i[1]) as f64);
        let c = a.contract(&b, &[1], &[0]).unwrap();
        assert_eq!(c.dims(), &[2, 4]);
        // Row 0: [1,2,3] . columns of b.
        assert_eq!(c.get(&[0, 0]), 1.0 * 0.0 + 2.0 * 4.0 + 3.0 * 8.0);
        assert_eq!(c.get(&[1, 3]), 4.0 * 3.0 + 5.0 * 7.0 + 6.0 * 11.0);
    }

    #[test]
    fn contract_with_identity_is_identity() {
        let a = tensor_2x3();
        let eye = DenseTensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let c = a.contract(&eye, &[1], &[0]).unwrap();
        assert_eq!(c.dims(), a.dims());
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn contract_errors_name_both_modes() {
        let a = tensor_2x3();
        let b = DenseTensor::zeros(&[4, 2]);
        let err = a.contract(&b, &[1], &[0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mode 1") && msg.contains("mode 0"), "{msg}");
        assert!(matches!(err, Error::Shape(_)));

        let err = a.contract(&b, &[1, 1], &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn mode_k_product_identity() {
        let a = DenseTensor::from_fn(&[2, 3, 2], |i| (i[0] * 6 + i[1] * 2 + i[2]) as f64);
        let eye = DenseTensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let out = a.mode_k_product(&eye, 1).unwrap();
        assert_eq!(out.dims(), a.dims());
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn mode_k_product_is_left_matrix_multiply() {
        let a = tensor_2x3();
        let b = DenseTensor::from_fn(&[4, 2], |i| (i[0] + 2 * i[1]) as f64);
        let out = a.mode_k_product(&b, 0).unwrap();
        assert_eq!(out.dims(), &[4, 3]);
        let expect = b.matmul(&a).unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn hadamard_scales_columns() {
        let a = tensor_2x3();
        let out = a.mode_k_hadamard(&[1.0, 0.0, 2.0], 1).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 6.0, 4.0, 0.0, 12.0]);
        assert!(a.mode_k_hadamard(&[1.0], 1).is_err());
    }

    #[test]
    fn permute_moves_dims() {
        let a = DenseTensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for idx in a.iter_indices() {
            assert_eq!(p.get(&[idx[2], idx[0], idx[1]]), a.get(&idx));
        }
        assert!(a.permute(&[0, 0, 1]).is_err());
        assert!(a.permute(&[0, 1]).is_err());
    }

    #[test]
    fn reshape_roundtrip() {
        let a = tensor_2x3();
        let b = a.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn take_selects_slices() {
        let a = tensor_2x3();
        let t = a.take(1, &[2, 0]).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.data(), &[3.0, 1.0, 6.0, 4.0]);
        assert!(a.take(1, &[5]).is_err());
    }
}
