//! Dense tensor algebra.
//!
//! [`DenseTensor`] is a row-major (last mode fastest) array of `f64` with an
//! explicit shape. On top of it this module provides mode-`n` unfolding, the
//! `n`-mode product, Tucker reconstruction and HOSVD.
//!
//! # Unfolding convention
//!
//! The mode-`n` unfolding of a tensor of shape `(D0, .., DN-1)` is the matrix
//! of shape `(Dn, prod_{k != n} Dk)` whose row `i` holds every entry with
//! `i_n = i`. Columns enumerate the remaining indices in increasing mode order
//! with the last index fastest, so for a 3rd-order tensor and `n = 1` the
//! column of `(i0, i2)` is `i0 * D2 + i2`.

pub(crate) mod linalg;
mod tucker;

pub use linalg::{jacobi_svd, leading_left_singular_vectors, orthonormality_defect, orthonormalize_columns, Svd};
pub use tucker::{hooi, hosvd, tucker_reconstruct, Hosvd};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

/// Work size above which loops are split across the rayon pool. Each output
/// element is still produced by exactly one sequential sum, so results do not
/// depend on the thread count.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape("tensor order must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-sized mode in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!("shape {shape:?} needs {n} entries, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty(), "tensor order must be at least 1");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Matrix from nested rows; all rows must have the same length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Uniform::new(low, high).expect("low < high");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data under a new shape with the same number of entries.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Rows and columns of an order-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::DimensionMismatch(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &DenseTensor) -> Result<Self> {
        let (m, k) = self.matrix_dims()?;
        let (k2, n) = rhs.matrix_dims()?;
        if k != k2 {
            return Err(Error::DimensionMismatch(format!("matmul of {m}x{k} by {k2}x{n}")));
        }
        Ok(Self { shape: vec![m, n], data: matmul(&self.data, &rhs.data, m, k, n) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute norm when `other` is zero.
    pub fn relative_error(&self, other: &DenseTensor) -> Result<f64> {
        let diff = self.sub(other)?.frobenius_norm();
        let base = other.frobenius_norm();
        Ok(if base == 0.0 { diff } else { diff / base })
    }

    pub(crate) fn check_same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!("shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange { mode, order: self.order() });
        }
        Ok(())
    }

    /// `(prod of modes before n, prod of modes after n)`.
    pub(crate) fn split_at_mode(&self, mode: usize) -> (usize, usize) {
        let pre = self.shape[..mode].iter().product();
        let post = self.shape[mode + 1..].iter().product();
        (pre, post)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

/// `op(A)·op(B)` with element strides `(row, col)` for each operand.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, sa: (isize, isize), sb: (isize, isize)) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the strides address `m×k` elements of `a` and `k×n` of `b`,
    // both within the lengths asserted above, and `out` is a fresh
    // row-major `m×n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Row-major `(m×k)·(k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (k as isize, 1), (n as isize, 1))
}

/// Row-major `(m×k)·(n×k)ᵀ`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (k as isize, 1), (1, k as isize))
}

/// Row-major `(k×m)ᵀ·(k×n)`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (1, m as isize), (n as isize, 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unfolding {
    pub source_shape: Vec<usize>,
    pub mode: usize,
    pub matrix: DenseTensor,
}

impl Unfolding {
    pub fn refold(&self) -> Result<DenseTensor> {
        refold(&self.matrix, self.mode, &self.source_shape)
    }
}

pub fn unfold(x: &DenseTensor, mode: usize) -> Result<Unfolding> {
    x.check_mode(mode)?;
    let (pre, post) = x.split_at_mode(mode);
    let dn = x.shape[mode];
    let cols = pre * post;
    let mut out = vec![0.0; dn * cols];
    for p in 0..pre {
        for i in 0..dn {
            let src = &x.data[(p * dn + i) * post..(p * dn + i + 1) * post];
            out[i * cols + p * post..i * cols + (p + 1) * post].copy_from_slice(src);
        }
    }
    Ok(Unfolding { source_shape: x.shape.clone(), mode, matrix: DenseTensor { shape: vec![dn, cols], data: out } })
}

/// Inverse of [`unfold`]: rebuilds a tensor of `shape` from its mode-`mode` unfolding.
pub fn refold(matrix: &DenseTensor, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    if mode >= shape.len() {
        return Err(Error::ModeOutOfRange { mode, order: shape.len() });
    }
    let dn = shape[mode];
    let pre: usize = shape[..mode].iter().product();
    let post: usize = shape[mode + 1..].iter().product();
    if matrix.shape != [dn, pre * post] {
        return Err(Error::DimensionMismatch(format!(
            "unfolding of shape {:?} cannot refold into {shape:?} along mode {mode}",
            matrix.shape
        )));
    }
    let cols = pre * post;
    let mut out = vec![0.0; dn * cols];
    for p in 0..pre {
        for i in 0..dn {
            out[(p * dn + i) * post..(p * dn + i + 1) * post]
                .copy_from_slice(&matrix.data[i * cols + p * post..i * cols + (p + 1) * post]);
        }
    }
    DenseTensor::new(shape.to_vec(), out)
}

/// `x ×_n m`: contracts mode `n` of `x` (size `Dn`) with the columns of
/// `m` (shape `R × Dn`), replacing that mode by `R`.
pub fn mode_product(x: &DenseTensor, m: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    x.check_mode(mode)?;
    let (rows, cols) = m.matrix_dims()?;
    let dn = x.shape[mode];
    if cols != dn {
        return Err(Error::DimensionMismatch(format!(
            "mode-{mode} product: matrix has {cols} columns, tensor mode has size {dn}"
        )));
    }
    let (pre, post) = x.split_at_mode(mode);
    let mut shape = x.shape.clone();
    shape[mode] = rows;
    let mut out = vec![0.0; pre * rows * post];
    let fiber = |(c, out_row): (usize, &mut [f64])| {
        let (p, r) = (c / rows, c % rows);
        let x_block = &x.data[p * dn * post..(p + 1) * dn * post];
        for k in 0..dn {
            let coef = m.data[r * cols + k];
            if coef == 0.0 {
                continue;
            }
            for (o, &v) in out_row.iter_mut().zip(&x_block[k * post..(k + 1) * post]) {
                *o += coef * v;
            }
        }
    };
    if pre * rows * dn * post >= PAR_THRESHOLD {
        let min_len = (PAR_THRESHOLD / (dn * post).max(1)).max(1);
        out.par_chunks_mut(post).with_min_len(min_len).enumerate().for_each(fiber);
    } else {
        out.chunks_mut(post).enumerate().for_each(fiber);
    }
    Ok(DenseTensor { shape, data: out })
}

pub fn frobenius_norm(x: &DenseTensor) -> f64 {
    x.frobenius_sq().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Direct evaluation of `T[i..] = Σ_k M[i_n, k] X[.., k, ..]` over every index.
    fn mode_product_oracle(x: &DenseTensor, m: &DenseTensor, n: usize) -> DenseTensor {
        let (r, _) = m.matrix_dims().unwrap();
        let mut shape = x.shape().to_vec();
        shape[n] = r;
        let mut out = DenseTensor::zeros(&shape);
        let total: usize = shape.iter().product();
        for flat in 0..total {
            let idx = unravel(flat, &shape);
            let mut acc = 0.0;
            for k in 0..x.shape()[n] {
                let mut src = idx.clone();
                src[n] = k;
                acc += m.get(&[idx[n], k]) * x.get(&src);
            }
            out.set(&idx, acc);
        }
        out
    }

    fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
        let mut idx = vec![0; shape.len()];
        for k in (0..shape.len()).rev() {
            idx[k] = flat % shape[k];
            flat /= shape[k];
        }
        idx
    }

    #[test]
    fn identity_mode_product_is_noop() {
        let mut rng = seeded(3);
        let x = DenseTensor::random_normal(&[3, 4, 5], 0.0, 1.0, &mut rng);
        let y = mode_product(&x, &DenseTensor::identity(4), 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ones_contraction_sums() {
        let x = DenseTensor::filled(&[2, 2, 2], 1.0);
        let m = DenseTensor::filled(&[1, 2], 1.0);
        let y = mode_product(&x, &m, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn random_mode_product_matches_loop_oracle() {
        let mut rng = seeded(11);
        let x = DenseTensor::random_normal(&[3, 4, 2], 0.0, 1.0, &mut rng);
        let m = DenseTensor::random_normal(&[5, 4], 0.0, 1.0, &mut rng);
        let fast = mode_product(&x, &m, 1).unwrap();
        let slow = mode_product_oracle(&x, &m, 1);
        assert!(fast.relative_error(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn mode_product_errors() {
        let x = DenseTensor::zeros(&[2, 3]);
        let m = DenseTensor::zeros(&[2, 2]);
        assert!(matches!(mode_product(&x, &m, 1), Err(Error::DimensionMismatch(_))));
        assert!(matches!(mode_product(&x, &m, 2), Err(Error::ModeOutOfRange { mode: 2, order: 2 })));
    }

    #[test]
    fn unfold_of_matrix_mode0_is_itself() {
        let x = DenseTensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(unfold(&x, 0).unwrap().matrix, x);
    }

    #[test]
    fn unfold_column_order_matches_enumeration() {
        let x = DenseTensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        for n in 0..3 {
            let u = unfold(&x, n).unwrap().matrix;
            // Remaining modes in increasing order, last fastest.
            let rest: Vec<usize> = (0..3).filter(|&k| k != n).collect();
            for i in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let mut idx = [0; 3];
                        idx[n] = i;
                        idx[rest[0]] = a;
                        idx[rest[1]] = b;
                        assert_eq!(u.get(&[i, a * 2 + b]), x.get(&idx));
                    }
                }
            }
        }
        // Spot values for mode 1: row 0 holds entries with i1 = 0.
        let u1 = unfold(&x, 1).unwrap().matrix;
        assert_eq!(u1.data(), &[0., 1., 4., 5., 2., 3., 6., 7.]);
    }

    #[test]
    fn unfold_refold_round_trip_is_exact() {
        let mut rng = seeded(5);
        let x = DenseTensor::random_normal(&[2, 3, 4, 2], 0.0, 1.0, &mut rng);
        for n in 0..x.order() {
            assert_eq!(unfold(&x, n).unwrap().refold().unwrap(), x);
        }
        assert!(unfold(&x, 4).is_err());
    }

    #[test]
    fn frobenius_values() {
        assert_eq!(DenseTensor::zeros(&[3, 2]).frobenius_norm(), 0.0);
        assert_eq!(DenseTensor::identity(2).frobenius_norm(), 2f64.sqrt());
        let mut rng = seeded(8);
        let x = DenseTensor::random_normal(&[3, 5, 2], 0.0, 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..2 {
                    acc += x.get(&[i, j, k]).powi(2);
                }
            }
        }
        assert!((x.frobenius_norm() - acc.sqrt()).abs() <= 1e-12 * acc.sqrt());
    }

    #[test]
    fn constructor_validates_shape() {
        assert!(DenseTensor::new(vec![], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = seeded(21);
        let a = DenseTensor::random_normal(&[4, 3], 0.0, 1.0, &mut rng);
        let b = DenseTensor::random_normal(&[3, 5], 0.0, 1.0, &mut rng);
        let ab = a.matmul(&b).unwrap();
        let bt = b.transpose().unwrap();
        let via_bt = matmul_a_bt(a.data(), bt.data(), 4, 3, 5);
        let at = a.transpose().unwrap();
        let via_at = matmul_at_b(at.data(), b.data(), 4, 3, 5);
        for ((x, y), z) in ab.data().iter().zip(&via_bt).zip(&via_at) {
            assert!((x - y).abs() < 1e-14 && (x - z).abs() < 1e-14);
        }
    }
}
