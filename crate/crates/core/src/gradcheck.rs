//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::tensor::DenseTensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const RELATIVE_TOLERANCE: f64 = 1e-4;
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every entry `i` of `x`.
pub fn numerical_gradient(x: &DenseTensor, h: f64, mut f: impl FnMut(&DenseTensor) -> f64) -> DenseTensor {
    let mut probe = x.clone();
    let mut out = DenseTensor::zeros(x.shape());
    for i in 0..x.len() {
        out.data_mut()[i] = partial(&mut probe, i, h, &mut f);
    }
    out
}

/// Central difference along a single coordinate; `probe` is restored afterwards.
pub fn partial(probe: &mut DenseTensor, index: usize, h: f64, mut f: impl FnMut(&DenseTensor) -> f64) -> f64 {
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let plus = f(probe);
    probe.data_mut()[index] = orig - h;
    let minus = f(probe);
    probe.data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// [`DEFAULT_STEP`] scaled down to the root-mean-square magnitude of `x` when
/// that is below one. Convolutions followed by batch norm make the loss
/// invariant to the scale of their weights, with curvature growing like the
/// inverse squared weight norm, so small-scale tensors need proportionally
/// small probes.
pub fn scaled_step(x: &DenseTensor) -> f64 {
    let rms = (x.frobenius_sq() / x.len() as f64).sqrt();
    if rms > 0.0 && rms < 1.0 {
        DEFAULT_STEP * rms
    } else {
        DEFAULT_STEP
    }
}

/// Error score of one analytic/numeric pair: zero when the absolute gap is
/// under [`ABSOLUTE_FLOOR`], otherwise the gap relative to the larger
/// magnitude. A pair passes when the score is at most [`RELATIVE_TOLERANCE`].
pub fn pair_error(analytic: f64, numeric: f64) -> f64 {
    let gap = (analytic - numeric).abs();
    if gap <= ABSOLUTE_FLOOR {
        0.0
    } else {
        gap / analytic.abs().max(numeric.abs())
    }
}

/// Step shrink factors tried by [`kink_tolerant_error`].
pub const STEP_SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// [`pair_error`] of `analytic` against `estimate(h')` for `h' = h`, `h/10`,
/// `h/100`, stopping at the first that passes. ReLU makes the loss only
/// piecewise smooth: a probe whose perturbation crosses a kink of any single
/// activation gives a wrong difference quotient at that step, but not at
/// smaller ones. A gradient bug disagrees at every step.
pub fn kink_tolerant_error(analytic: f64, h: f64, mut estimate: impl FnMut(f64) -> f64) -> f64 {
    let mut best = f64::INFINITY;
    for s in STEP_SHRINK {
        best = best.min(pair_error(analytic, estimate(h * s)));
        if best <= RELATIVE_TOLERANCE {
            break;
        }
    }
    best
}

/// Largest [`pair_error`] over two equally shaped tensors.
pub fn max_error(analytic: &DenseTensor, numeric: &DenseTensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| pair_error(a, n)).fold(0.0, f64::max)
}
