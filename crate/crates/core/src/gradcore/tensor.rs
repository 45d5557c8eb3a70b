//! Dense row-major `f64` tensors and the raw kernels shared by the tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, numeric_err, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// Every constructor that accepts caller data rejects NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(numeric_err!("non-finite value {} at flat index {}", data[i], i));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; finiteness is checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new([n], data)
    }

    /// Matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new([m, n], rows.iter().flatten().copied().collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(contract_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let flat: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let st = strides(&self.shape);
        let flat: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat] = value;
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(numeric_err!("{what} produced non-finite value at flat index {i}")),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Leading axes must agree, or `other` must be a plain matrix shared by
    /// every batch entry.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(&self.data, &other.data, &mut out);
        Ok(Self::from_parts(plan.out_shape.clone(), out))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2, got {:?}", self.shape));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        Ok(self.permute(&perm))
    }

    pub(crate) fn permute(&self, perm: &[usize]) -> Self {
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_st = strides(&self.shape);
        let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
        Self::from_parts(out_shape.clone(), strided_gather(&self.data, &out_shape, &src_st))
    }
}

/// Read `src` at offsets `Σ idx[a]·src_strides[a]` for every multi-index of
/// `shape` in row-major order. A zero stride repeats (broadcasts) an axis.
pub(crate) fn strided_gather(src: &[f64], shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(numel(shape));
    for_each_run(shape, src_strides, |base, len, stride| match stride {
        0 => out.extend(std::iter::repeat_n(src[base], len)),
        1 => out.extend_from_slice(&src[base..base + len]),
        _ => out.extend((0..len).map(|i| src[base + i * stride])),
    });
    out
}

/// Adjoint of [`strided_gather`]: add each element of `g` (laid out over
/// `shape`) into `dst` at its source offset.
pub(crate) fn strided_scatter_add(g: &[f64], shape: &[usize], dst_strides: &[usize], dst: &mut [f64]) {
    let mut k = 0;
    for_each_run(shape, dst_strides, |base, len, stride| {
        let run = &g[k..k + len];
        match stride {
            0 => dst[base] += run.iter().sum::<f64>(),
            1 => dst[base..base + len].iter_mut().zip(run).for_each(|(d, v)| *d += v),
            _ => run.iter().enumerate().for_each(|(i, v)| dst[base + i * stride] += v),
        }
        k += len;
    });
}

/// Visit `shape` in row-major order one innermost run at a time, passing the
/// run's base offset, length and stride under `strides`.
fn for_each_run(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let Some((&len, outer)) = shape.split_last() else {
        f(0, 1, 0);
        return;
    };
    let stride = strides[shape.len() - 1];
    for_each_index(outer, |idx| {
        let base = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        f(base, len, stride);
    });
}

/// Visit every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Resolved shapes for a (possibly batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is one matrix reused for every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2 operands, got {:?} and {:?}", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions differ: {:?} x {:?}", a, b));
        }
        let lead_a = &a[..a.len() - 2];
        let lead_b = &b[..b.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(dim_err!("matmul batch axes differ: {:?} x {:?}", a, b));
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        Ok(Self { batch: numel(lead_a), m, k, n, shared_rhs, out_shape })
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn rhs_offset(&self, b: usize) -> usize {
        if self.shared_rhs {
            0
        } else {
            b * self.k * self.n
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        if self.shared_rhs {
            // One tall product; rows of every batch entry stack up.
            gemm_nn(self.batch * self.m, self.k, self.n, a, b, out);
            return;
        }
        for bi in 0..self.batch {
            let ao = bi * self.m * self.k;
            let bo = self.rhs_offset(bi);
            let oo = bi * self.m * self.n;
            gemm_nn(
                self.m,
                self.k,
                self.n,
                &a[ao..ao + self.m * self.k],
                &b[bo..bo + self.k * self.n],
                &mut out[oo..oo + self.m * self.n],
            );
        }
    }

    /// Accumulate `dA += G·Bᵀ`.
    pub fn grad_lhs(&self, g: &[f64], b: &[f64], da: &mut [f64]) {
        if self.shared_rhs {
            gemm_nt(self.batch * self.m, self.n, self.k, g, b, da);
            return;
        }
        for bi in 0..self.batch {
            let go = bi * self.m * self.n;
            let bo = self.rhs_offset(bi);
            let ao = bi * self.m * self.k;
            gemm_nt(
                self.m,
                self.n,
                self.k,
                &g[go..go + self.m * self.n],
                &b[bo..bo + self.k * self.n],
                &mut da[ao..ao + self.m * self.k],
            );
        }
    }

    /// Accumulate `dB += Aᵀ·G` (summed over batch when `b` is shared).
    pub fn grad_rhs(&self, a: &[f64], g: &[f64], db: &mut [f64]) {
        if self.shared_rhs {
            gemm_tn(self.batch * self.m, self.k, self.n, a, g, db);
            return;
        }
        for bi in 0..self.batch {
            let ao = bi * self.m * self.k;
            let go = bi * self.m * self.n;
            let bo = self.rhs_offset(bi);
            gemm_tn(
                self.m,
                self.k,
                self.n,
                &a[ao..ao + self.m * self.k],
                &g[go..go + self.m * self.n],
                &mut db[bo..bo + self.k * self.n],
            );
        }
    }
}

/// `out += a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out += a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out += aᵀ·b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm(k, m, n, a, (1, k), b, (n, 1), out);
}

/// `out (r×c, row-major) += A·B` for strided `A: r×inner` and `B: inner×c`.
#[allow(clippy::too_many_arguments)]
fn gemm(r: usize, inner: usize, c: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    assert!(a.len() >= r * inner && b.len() >= inner * c && out.len() >= r * c, "gemm buffer too small");
    if r == 0 || c == 0 || inner == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every index the kernel touches for
    // the given dimensions and strides, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            r,
            inner,
            c,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            c as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(Tensor::new([2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new([2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_shared_rhs_matches_per_batch() {
        let mut rng = rand::rng();
        let a = Tensor::randn([3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn([5, 2], 1.0, &mut rng);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[3, 4, 2]);
        for bi in 0..3 {
            for i in 0..4 {
                for j in 0..2 {
                    let want: f64 = (0..5).map(|p| a.get(&[bi, i, p]) * b.get(&[p, j])).sum();
                    assert!((out.get(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), t.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }
}
