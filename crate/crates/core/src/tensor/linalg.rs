//! Small dense linear algebra: one-sided Jacobi SVD and Gram-Schmidt.

use super::{matmul_a_bt, DenseTensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U diag(s) Vᵀ` with singular values sorted in decreasing order.
///
/// For an `m×n` input, `u` is `m×n`, `s` has `n` entries and `v` is a full
/// `n×n` orthogonal matrix. Columns of `u` belonging to zero singular values
/// are zero.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Pairs of columns are rotated until every pair is orthogonal to working
/// precision; the accumulated rotations form `V`. Returns `None` when the
/// sweeps fail to converge.
pub fn jacobi_svd(a: &DenseTensor) -> Option<Svd> {
    let (m, n) = a.matrix_dims().ok()?;
    // Column-major working copies: cols[j] is column j of A, vcols[j] of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    // Columns below this squared norm are numerically null and never rotated.
    let total: f64 = a.frobenius_sq();
    let negligible = (eps * (m.max(n) as f64)).powi(2) * total;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() || alpha.min(beta) <= negligible {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = DenseTensor::zeros(&[m, n]);
    let mut v = DenseTensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u.data_mut()[i * n + dst] = cols[src][i] / sigma;
            }
        }
        for i in 0..n {
            v.data_mut()[i * n + dst] = vcols[src][i];
        }
    }
    Some(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// The `rank` leading left singular vectors of a `D×M` matrix, as a `D×rank`
/// matrix with orthonormal columns.
///
/// Works on the `D×D` Gram matrix `X Xᵀ`, whose right singular vectors are the
/// left singular vectors of `X`. The returned basis is always complete, even
/// when `X` is rank deficient. `mode` only labels the error.
pub fn leading_left_singular_vectors(x: &DenseTensor, rank: usize, mode: usize) -> Result<DenseTensor> {
    let (d, m) = x.matrix_dims()?;
    if rank > d {
        return Err(Error::RankExceedsDimension { mode, rank, dim: d });
    }
    let gram = DenseTensor::new(vec![d, d], matmul_a_bt(x.data(), x.data(), d, m, d))?;
    let svd = jacobi_svd(&gram).ok_or(Error::SvdFailed { mode })?;
    let mut out = DenseTensor::zeros(&[d, rank]);
    for i in 0..d {
        for j in 0..rank {
            out.data_mut()[i * rank + j] = svd.v.data()[i * d + j];
        }
    }
    Ok(out)
}

/// Orthonormal basis for the column space of a `D×R` matrix (`R ≤ D`),
/// by twice-iterated modified Gram-Schmidt. Columns that collapse are
/// replaced by the first standard basis vector that is independent of the
/// ones already accepted, so the result always has orthonormal columns.
pub fn orthonormalize_columns(a: &DenseTensor) -> Result<DenseTensor> {
    let (d, r) = a.matrix_dims()?;
    if r > d {
        return Err(Error::DimensionMismatch(format!("cannot orthonormalize {r} columns in dimension {d}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut next_unit = 0;
    for j in 0..r {
        let mut col: Vec<f64> = (0..d).map(|i| a.data()[i * r + j]).collect();
        let scale = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !project_out(&mut col, &basis, scale) {
            loop {
                let mut e = vec![0.0; d];
                e[next_unit] = 1.0;
                next_unit += 1;
                if project_out(&mut e, &basis, 1.0) {
                    col = e;
                    break;
                }
            }
        }
        basis.push(col);
    }
    let mut out = DenseTensor::zeros(&[d, r]);
    for (j, col) in basis.iter().enumerate() {
        for i in 0..d {
            out.data_mut()[i * r + j] = col[i];
        }
    }
    Ok(out)
}

/// Removes the components of `v` along `basis` and normalizes it. Returns
/// false when nothing independent of `basis` is left.
fn project_out(v: &mut [f64], basis: &[Vec<f64>], scale: f64) -> bool {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 || norm <= 1e-10 * scale {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// `‖AᵀA − Id‖_F` for a matrix with (ideally) orthonormal columns.
pub fn orthonormality_defect(a: &DenseTensor) -> f64 {
    let (_, r) = a.matrix_dims().expect("matrix");
    let gram = a.transpose().expect("matrix").matmul(a).expect("conformable");
    gram.sub(&DenseTensor::identity(r)).expect("square").frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        let mut rng = seeded(1);
        for shape in [[6, 4], [4, 6], [5, 5]] {
            let a = DenseTensor::random_normal(&shape, 0.0, 1.0, &mut rng);
            let svd = jacobi_svd(&a).unwrap();
            let n = shape[1];
            let mut us = svd.u.clone();
            for i in 0..shape[0] {
                for j in 0..n {
                    us.data_mut()[i * n + j] *= svd.s[j];
                }
            }
            let rebuilt = us.matmul(&svd.v.transpose().unwrap()).unwrap();
            assert!(rebuilt.relative_error(&a).unwrap() < 1e-12);
            assert!(orthonormality_defect(&svd.v) < 1e-12);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn leading_vectors_of_rank_deficient_matrix_are_orthonormal() {
        // Rank one: every column is a multiple of u.
        let u = [1.0, 2.0, -1.0, 0.5];
        let w = [0.3, -1.0, 2.0];
        let data: Vec<f64> = u.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect();
        let x = DenseTensor::new(vec![4, 3], data).unwrap();
        let basis = leading_left_singular_vectors(&x, 4, 0).unwrap();
        assert!(orthonormality_defect(&basis) < 1e-12);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lead: f64 = (0..4).map(|i| basis.get(&[i, 0]) * u[i] / norm).sum();
        assert!((lead.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_larger_than_rows_is_rejected() {
        let x = DenseTensor::zeros(&[2, 3]);
        assert!(matches!(
            leading_left_singular_vectors(&x, 3, 4),
            Err(Error::RankExceedsDimension { mode: 4, rank: 3, dim: 2 })
        ));
    }

    #[test]
    fn gram_schmidt_handles_dependent_columns() {
        let a = DenseTensor::from_rows(&[&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0], &[0.0, 0.0, 0.0]]).unwrap();
        let q = orthonormalize_columns(&a).unwrap();
        assert!(orthonormality_defect(&q) < 1e-12);
    }
}
