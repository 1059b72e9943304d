//! Central finite differences, the reference gradient for every op test.

use crate::error::Result;
use crate::scalar::Scalar;

/// Numeric gradient of `f` at `values` via central differences.
///
/// `f` receives a perturbed copy of the input and returns a scalar loss.
pub fn central_diff<S, F>(values: &[S], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<S>,
{
    let mut grad = Vec::with_capacity(values.len());
    let mut work: Vec<S> = values.to_vec();
    for i in 0..values.len() {
        let orig = work[i];
        work[i] = S::from_f64(orig.to_f64_lossy() + eps);
        let up = f(&work)?.to_f64_lossy();
        work[i] = S::from_f64(orig.to_f64_lossy() - eps);
        let down = f(&work)?.to_f64_lossy();
        work[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Worst relative error between two gradient vectors.
///
/// Per element: |a−b| / max(1, |a|, |b|), i.e. relative for large values,
/// absolute once both are below 1 (a pure ratio blows up near zero).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x,y) = x^2 + 3y, df = (2x, 3).
        let g = central_diff(&[2.0_f64, 5.0], 1e-5, |v| Ok(v[0] * v[0] + 3.0 * v[1])).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_mixes_scales() {
        assert!(max_rel_err(&[1000.0], &[1000.1]) < 1e-3);
        assert!(max_rel_err(&[0.0], &[1e-6]) < 1e-5);
        assert!(max_rel_err(&[1.0], &[2.0]) > 0.4);
    }
}
