//! Central finite-difference utilities used by gradient verification tests.
//!
//! These are checking tools, not training machinery: tests build a scalar
//! function of a flat parameter vector and compare the engine's gradients
//! against [`central_diff_grad`] at double precision.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradient vectors, with the denominator
/// floored at 1 so near-zero entries are compared absolutely.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert!(got.len() == want.len(), "gradient length mismatch: {} vs {}", got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_fd_order() {
        let x = vec![1.0, -2.0, 3.0];
        let mut f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let g = central_diff_grad(&mut f, &x, 1e-5);
        let want = vec![2.0, -4.0, 6.0];
        assert!(max_rel_err(&g, &want) < 1e-9);
    }
}
