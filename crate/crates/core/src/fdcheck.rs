//! Central-finite-difference oracles for gradient checks.
//!
//! These helpers are test instrumentation: they re-evaluate a scalar function
//! under elementwise perturbations and never touch the reverse-mode path they
//! are used to check.

/// Central-difference gradient of `f` at `x0`, one evaluation pair per element.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Largest [`rel_err`] over two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let grad = central_diff_grad(&mut f, &[1.0, -2.0, 0.5], 1e-5);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&grad, &expect) < 1e-9);
    }
}
