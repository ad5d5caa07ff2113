use super::{leading_left_singular_vectors, mode_product, unfold, DenseTensor};
use crate::error::{Error, Result};

/// `core ×_0 F0 ×_1 F1 ⋯ ×_{N-1} F_{N-1}`.
pub fn tucker_reconstruct(core: &DenseTensor, factors: &[DenseTensor]) -> Result<DenseTensor> {
    if factors.len() != core.order() {
        return Err(Error::DimensionMismatch(format!(
            "core of order {} needs {} factors, got {}",
            core.order(),
            core.order(),
            factors.len()
        )));
    }
    let mut out = core.clone();
    for (mode, f) in factors.iter().enumerate() {
        out = mode_product(&out, f, mode)?;
    }
    Ok(out)
}

/// A Tucker decomposition with orthonormal factors.
#[derive(Clone, Debug)]
pub struct Hosvd {
    pub core: DenseTensor,
    /// Factor `k` has shape `(Dk, Rk)`.
    pub factors: Vec<DenseTensor>,
    /// `‖x − reconstruction‖_F`, from `‖x‖² − ‖core‖²` (valid because the
    /// factors are orthonormal, so the reconstruction is an orthogonal projection).
    pub residual_norm: f64,
}

/// Truncated higher-order SVD: factor `k` holds the leading `ranks[k]` left
/// singular vectors of the mode-`k` unfolding, and the core is `x`
/// contracted with every transposed factor.
pub fn hosvd(x: &DenseTensor, ranks: &[usize]) -> Result<Hosvd> {
    check_ranks(x, ranks)?;
    let factors = (0..x.order())
        .map(|k| leading_left_singular_vectors(&unfold(x, k)?.matrix, ranks[k], k))
        .collect::<Result<Vec<_>>>()?;
    finish(x, factors)
}

/// HOSVD followed by `iterations` sweeps of higher-order orthogonal iteration.
/// With `iterations == 0` this is exactly [`hosvd`].
pub fn hooi(x: &DenseTensor, ranks: &[usize], iterations: usize) -> Result<Hosvd> {
    let mut factors = hosvd(x, ranks)?.factors;
    for _ in 0..iterations {
        for n in 0..x.order() {
            let mut y = x.clone();
            for (k, f) in factors.iter().enumerate() {
                if k != n {
                    y = mode_product(&y, &f.transpose()?, k)?;
                }
            }
            factors[n] = leading_left_singular_vectors(&unfold(&y, n)?.matrix, ranks[n], n)?;
        }
    }
    finish(x, factors)
}

fn finish(x: &DenseTensor, factors: Vec<DenseTensor>) -> Result<Hosvd> {
    let mut core = x.clone();
    for (k, f) in factors.iter().enumerate() {
        core = mode_product(&core, &f.transpose()?, k)?;
    }
    let residual_norm = (x.frobenius_sq() - core.frobenius_sq()).max(0.0).sqrt();
    Ok(Hosvd { core, factors, residual_norm })
}

fn check_ranks(x: &DenseTensor, ranks: &[usize]) -> Result<()> {
    if ranks.len() != x.order() {
        return Err(Error::DimensionMismatch(format!("{} ranks for a tensor of order {}", ranks.len(), x.order())));
    }
    for (mode, (&rank, &dim)) in ranks.iter().zip(x.shape()).enumerate() {
        if rank == 0 || rank > dim {
            return Err(Error::RankExceedsDimension { mode, rank, dim });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::linalg::orthonormality_defect;
    use crate::tensor::orthonormalize_columns;

    #[test]
    fn identity_factors_return_core() {
        let mut rng = seeded(2);
        let core = DenseTensor::random_normal(&[2, 3, 4], 0.0, 1.0, &mut rng);
        let factors: Vec<_> = core.shape().iter().map(|&d| DenseTensor::identity(d)).collect();
        assert_eq!(tucker_reconstruct(&core, &factors).unwrap(), core);
    }

    #[test]
    fn zero_core_maps_to_zeros() {
        let core = DenseTensor::zeros(&[2, 2]);
        let mut rng = seeded(2);
        let f = vec![
            DenseTensor::random_normal(&[3, 2], 0.0, 1.0, &mut rng),
            DenseTensor::random_normal(&[5, 2], 0.0, 1.0, &mut rng),
        ];
        let out = tucker_reconstruct(&core, &f).unwrap();
        assert_eq!(out, DenseTensor::zeros(&[3, 5]));
    }

    #[test]
    fn mode_order_does_not_matter() {
        let mut rng = seeded(4);
        let core = DenseTensor::random_normal(&[2, 2, 2], 0.0, 1.0, &mut rng);
        let f: Vec<_> = (0..3).map(|_| DenseTensor::random_normal(&[2, 2], 0.0, 1.0, &mut rng)).collect();
        let forward = tucker_reconstruct(&core, &f).unwrap();
        let mut backward = core.clone();
        for k in [2, 0, 1] {
            backward = mode_product(&backward, &f[k], k).unwrap();
        }
        assert!(forward.relative_error(&backward).unwrap() <= 1e-12);
    }

    #[test]
    fn factor_count_must_match_order() {
        let core = DenseTensor::zeros(&[2, 2]);
        assert!(tucker_reconstruct(&core, &[DenseTensor::identity(2)]).is_err());
        let bad = [DenseTensor::identity(2), DenseTensor::identity(3)];
        assert!(matches!(tucker_reconstruct(&core, &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn full_rank_hosvd_is_exact_and_orthonormal() {
        let mut rng = seeded(7);
        let x = DenseTensor::random_normal(&[4, 4, 3, 3, 2, 2], 0.0, 1.0, &mut rng);
        let dec = hosvd(&x, x.shape()).unwrap();
        let rebuilt = tucker_reconstruct(&dec.core, &dec.factors).unwrap();
        assert!(rebuilt.relative_error(&x).unwrap() <= 1e-10);
        for f in &dec.factors {
            assert!(orthonormality_defect(f) <= 1e-8);
        }
    }

    #[test]
    fn rank_one_tensor_is_recovered_at_rank_one() {
        let a = [1.0, -2.0, 0.5];
        let b = [0.3, 1.1];
        let c = [2.0, -1.0, 1.0, 0.25];
        let mut data = Vec::new();
        for x in a {
            for y in b {
                for z in c {
                    data.push(x * y * z);
                }
            }
        }
        let t = DenseTensor::new(vec![3, 2, 4], data).unwrap();
        let dec = hosvd(&t, &[1, 1, 1]).unwrap();
        let rebuilt = tucker_reconstruct(&dec.core, &dec.factors).unwrap();
        assert!(rebuilt.relative_error(&t).unwrap() <= 1e-10);
    }

    #[test]
    fn rank_exceeding_dimension_errors() {
        let x = DenseTensor::zeros(&[2, 3]);
        assert!(matches!(hosvd(&x, &[3, 3]), Err(Error::RankExceedsDimension { mode: 0, rank: 3, dim: 2 })));
        assert!(hosvd(&x, &[2]).is_err());
    }

    #[test]
    fn residual_norm_matches_actual_reconstruction_error() {
        let mut rng = seeded(9);
        let x = DenseTensor::random_normal(&[5, 4, 3], 0.0, 1.0, &mut rng);
        let dec = hosvd(&x, &[3, 2, 2]).unwrap();
        let rebuilt = tucker_reconstruct(&dec.core, &dec.factors).unwrap();
        let actual = rebuilt.sub(&x).unwrap().frobenius_norm();
        assert!((actual - dec.residual_norm).abs() <= 1e-10 * x.frobenius_norm());
        assert!(actual > 0.0);
    }

    /// Error of the best core for the given orthonormal factors.
    fn projection_error(x: &DenseTensor, factors: &[DenseTensor]) -> f64 {
        let mut core = x.clone();
        for (k, f) in factors.iter().enumerate() {
            core = mode_product(&core, &f.transpose().unwrap(), k).unwrap();
        }
        let rebuilt = tucker_reconstruct(&core, factors).unwrap();
        rebuilt.sub(x).unwrap().frobenius_norm()
    }

    fn perturbation_oracle(x: &DenseTensor, dec: &Hosvd, seed: u64) {
        let base = projection_error(x, &dec.factors);
        let mut rng = seeded(seed);
        for _ in 0..50 {
            let perturbed: Vec<_> = dec
                .factors
                .iter()
                .map(|f| {
                    let noise = DenseTensor::random_normal(f.shape(), 0.0, 1e-3, &mut rng);
                    orthonormalize_columns(&f.add(&noise).unwrap()).unwrap()
                })
                .collect();
            let competitor = projection_error(x, &perturbed);
            assert!(base <= competitor + 1e-12 * x.frobenius_norm(), "{base} > {competitor}");
        }
    }

    #[test]
    fn single_mode_truncation_beats_perturbed_competitors() {
        let mut rng = seeded(13);
        let x = DenseTensor::random_normal(&[6, 4, 3], 0.0, 1.0, &mut rng);
        let dec = hosvd(&x, &[3, 4, 3]).unwrap();
        perturbation_oracle(&x, &dec, 14);
    }

    #[test]
    fn refined_multi_mode_truncation_beats_perturbed_competitors() {
        let mut rng = seeded(15);
        let x = DenseTensor::random_normal(&[5, 5, 4], 0.0, 1.0, &mut rng);
        let plain = hosvd(&x, &[3, 3, 2]).unwrap();
        let refined = hooi(&x, &[3, 3, 2], 60).unwrap();
        assert!(refined.residual_norm <= plain.residual_norm + 1e-12);
        perturbation_oracle(&x, &refined, 16);
    }
}
