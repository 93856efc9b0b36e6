//! Central finite differences for verifying analytic gradients.
//!
//! These routines only evaluate the function; they never touch the tape, so
//! they stay independent of the backward rules they check.

/// `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
        assert!(relative_error(&g, &[4.0, 3.0]) < 1e-8);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
