//! Central finite-difference comparison against analytic gradients.

use crate::optim::ParamSet;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries where both gradients are below this magnitude count as agreeing.
pub const NEGLIGIBLE: f64 = 1e-10;

/// `|a − n| / max(|a|, |n|)`, or 0 when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < NEGLIGIBLE {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Worst relative error between `analytic` and the central difference of
/// `loss` over every scalar in `params`.
pub fn max_relative_error<P, F>(params: &P, analytic: &P, loss: F, step: f64) -> f64
where
    P: ParamSet<f64>,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.iter().copied().collect()).collect();
    let mut worst = 0.0f64;
    for (ti, g) in grads.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            let original = nth(&mut probe, ti, k, None);
            nth(&mut probe, ti, k, Some(original + step));
            let plus = loss(&probe);
            nth(&mut probe, ti, k, Some(original - step));
            let minus = loss(&probe);
            nth(&mut probe, ti, k, Some(original));
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

fn nth<P: ParamSet<f64>>(p: &mut P, tensor: usize, k: usize, set: Option<f64>) -> f64 {
    let mut ts = p.tensors_mut();
    let slot = ts[tensor].iter_mut().nth(k).expect("index in range");
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
