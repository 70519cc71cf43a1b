//! Central finite-difference verification of analytic gradients.
//!
//! Used by the test suites; the numeric side only ever calls the forward
//! pass, so it stays independent of the backward implementation it checks.

use crate::mat::Mat;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of a scalar function at `x`, one forward evaluation
/// pair per component.
pub fn fd_gradient(mut f: impl FnMut(&Mat) -> f64, x: &Mat, step: f64) -> Mat {
    let mut grad = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst-case relative disagreement between two gradients. Components where
/// both magnitudes are below `1e-7` are compared absolutely (finite
/// differences carry ~1e-10 of noise there, a relative measure would be
/// meaningless).
pub fn max_rel_error(analytic: &Mat, numeric: &Mat) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let mag = a.abs().max(n.abs());
        let err = if mag < 1e-7 {
            (a - n).abs()
        } else {
            (a - n).abs() / mag
        };
        worst = worst.max(err);
    }
    worst
}
