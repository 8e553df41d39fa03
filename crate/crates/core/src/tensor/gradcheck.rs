//! Central finite differences for checking tape gradients.
//!
//! These helpers only ever evaluate the function forward, so they are an
//! independent route to the derivative.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference derivative of `f` along selected coordinates only.
pub fn central_difference_at(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`. The floor keeps
/// near-zero derivatives from dominating through round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y, floor))
        .fold(0.0, f64::max)
}
