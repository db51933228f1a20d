//! Central finite-difference oracle for gradient checks.
//!
//! The oracle only ever evaluates a closure at perturbed inputs, so it is
//! independent of the backward pass it is used to check. It is kept in the
//! library (rather than test code) because both the unit suites and the
//! acceptance suite rely on it, always at `f64`.

/// Central differences: `(f(x+h·e_i) - f(x-h·e_i)) / 2h` per coordinate.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let down = f(&buf);
        buf[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Max relative error between an analytic gradient and a numeric one.
///
/// Per coordinate: absolute differences below `1e-7` count as zero (both
/// values numerically vanish), otherwise `|a-n| / max(|a|, |n|)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff < 1e-7 {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Default step for `f64` central differences.
pub const DEFAULT_H: f64 = 1e-4;

/// Default pass threshold for relative errors.
pub const DEFAULT_TOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), df/dx = 2x
        let x = [0.5, -1.25, 3.0];
        let num = central_diff(|v| v.iter().map(|a| a * a).sum(), &x, DEFAULT_H);
        let ana: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&ana, &num) < 1e-8);
    }
}
