//! Finite-difference utilities used by the verification suites.
//!
//! The closures evaluated here must be deterministic functions of the flat
//! parameter vector (fixed RNG draws, frozen dropout masks, frozen power
//! iteration state).

/// Central-difference gradient of `f` at `x0`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let step = h * (1.0 + x0[i].abs());
        x[i] = x0[i] + step;
        let fp = f(&x);
        x[i] = x0[i] - step;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error between two gradient vectors:
/// ||a - b|| / max(||a||, ||b||, floor).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_analytic_on_quadratic() {
        // f(x) = sum x_i^2, grad = 2x
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x0 = [1.0, -2.0, 0.5];
        let fd = finite_diff_grad(&mut f, &x0, 1e-6);
        let analytic: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        assert!(rel_err(&fd, &analytic) < 1e-9);
    }
}
