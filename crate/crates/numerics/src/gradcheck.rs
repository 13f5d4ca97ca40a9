//! Central finite-difference utilities for gradient verification.
//!
//! These probes rebuild the forward graph on every evaluation, so they stay
//! independent of the recorded VJPs they are used to check.

use crate::tensor::Tensor;

/// Central difference d loss / d param[coord] with step `h`, evaluating the
/// caller-supplied loss closure at param[coord] ± h.
pub fn numeric_grad(loss: &mut dyn FnMut() -> f64, param: &Tensor, coord: usize, h: f64) -> f64 {
    let orig = param.value_at(coord);
    param.set_value_at(coord, orig + h);
    let plus = loss();
    param.set_value_at(coord, orig - h);
    let minus = loss();
    param.set_value_at(coord, orig);
    (plus - minus) / (2.0 * h)
}

/// Relative error with an absolute floor so that near-zero pairs compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between an analytic gradient buffer and central
/// differences over the given coordinates.
pub fn max_rel_err(
    loss: &mut dyn FnMut() -> f64,
    param: &Tensor,
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    coords
        .iter()
        .map(|&c| rel_err(analytic[c], numeric_grad(loss, param, c, h)))
        .fold(0.0, f64::max)
}
