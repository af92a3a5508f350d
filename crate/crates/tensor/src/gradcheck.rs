//! Finite-difference verification of analytic gradients.

use crate::{Gradients, ParamSet, Tensor};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Bound on the roundoff in a five-point difference of a function of size
/// `f0`: the stencil weights sum to 18/12 and each evaluation may be off by
/// a few ulps. Differences below this are indistinguishable from zero.
fn roundoff(f0: f64, h: f64) -> f64 {
    4.0 * 1.5 * f64::EPSILON * f0.abs().max(1.0) / h
}

/// Relative error after discounting the stencil's roundoff `noise`.
fn discounted_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let gap = ((analytic - numeric).abs() - noise).max(0.0);
    gap / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Five-point stencil: truncation error is `O(h^4)`, so a larger `h` can be
/// used and roundoff in `f` matters less. `at(dx)` evaluates `f` with the
/// coordinate shifted by `dx`.
fn central_difference(h: f64, mut at: impl FnMut(f64) -> f64) -> f64 {
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

/// Largest relative error between `analytic` and central differences of
/// `f` at `x`, over every coordinate. Discrepancies within the roundoff of
/// the difference quotient are not counted, so exactly-zero gradients (a
/// key bias under softmax, say) do not compare noise against noise.
pub fn grad_check(x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut probe = x.clone();
    let noise = roundoff(f(x), h);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        let numeric = central_difference(h, |dx| {
            probe.data_mut()[i] = orig + dx;
            f(&probe)
        });
        probe.data_mut()[i] = orig;
        worst = worst.max(discounted_error(analytic.data()[i], numeric, noise));
    }
    worst
}

/// Checks up to `samples` evenly spaced coordinates of every parameter,
/// plus its `samples / 2` largest analytic gradient entries. Returns
/// `(name, worst relative error)` per parameter; a parameter with no
/// analytic gradient is compared against zero.
pub fn grad_check_params(
    params: &ParamSet<f64>,
    analytic: &Gradients<f64>,
    samples: usize,
    h: f64,
    mut f: impl FnMut(&ParamSet<f64>) -> f64,
) -> Vec<(String, f64)> {
    let mut probe = params.clone();
    let noise = roundoff(f(params), h);
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let len = params.get(id).len();
        let mut picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            // Odd stride offset so picks do not all fall on the same column.
            (0..samples).map(|k| (k * len / samples + k % 7) % len).collect()
        };
        if let Some(g) = analytic.param(id) {
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
            picks.extend(order.into_iter().take(samples / 2));
            picks.sort_unstable();
            picks.dedup();
        }
        let mut worst = 0.0f64;
        for i in picks {
            let orig = params.get(id).data()[i];
            let numeric = central_difference(h, |dx| {
                probe.get_mut(id).data_mut()[i] = orig + dx;
                f(&probe)
            });
            probe.get_mut(id).data_mut()[i] = orig;
            let a = analytic.param(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(discounted_error(a, numeric, noise));
        }
        report.push((params.name(id).to_string(), worst));
    }
    report
}
