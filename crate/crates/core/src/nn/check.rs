//! Finite-difference gradient oracle. Only evaluates the loss, never the backward pass.

use super::NetworkParams;

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every parameter.
pub fn central_difference(
    params: &NetworkParams,
    h: f64,
    mut loss: impl FnMut(&NetworkParams) -> f64,
) -> NetworkParams {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.set_flat(&flat);
        let up = loss(&probe);
        flat[i] = base[i] - h;
        probe.set_flat(&flat);
        let down = loss(&probe);
        flat[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    let mut g = params.zeros_like();
    g.set_flat(&out);
    g
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dominating through
/// finite-difference round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-6;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}
