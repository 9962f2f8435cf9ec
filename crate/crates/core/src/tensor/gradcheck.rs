//! Central finite-difference gradient checking (f64 only).

use serde::Serialize;

use super::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Central difference formula used by [`finite_diff_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error O(h²).
    #[default]
    ThreePoint,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

/// Compares the analytic gradients stored on `params` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` of `f`.
///
/// Only tensors with `requires_grad` are checked; a missing gradient slot is
/// read as zeros. Relative error is `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    finite_diff_check_with(f, params, h, tol, Stencil::ThreePoint)
}

/// [`finite_diff_check`] with a selectable stencil.
pub fn finite_diff_check_with<F>(
    mut f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
    stencil: Stencil,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = params.iter().map(Tensor::detached).collect();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        for ei in 0..p.len() {
            let analytic = p.grad().map_or(0.0, |g| g[ei]);
            let orig = work[pi].data()[ei];
            let mut at = |step: f64| {
                work[pi].data_mut()[ei] = orig + step;
                f(&work)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h) - at(-h)) / (2.0 * h),
                // Paired differences first: a parameter f ignores yields exactly 0.
                Stencil::FivePoint => {
                    let near = at(h) - at(-h);
                    let far = at(2.0 * h) - at(-2.0 * h);
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            work[pi].data_mut()[ei] = orig;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            checked += 1;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((pi, ei));
            }
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        pass: max_rel < tol,
    }
}
