//! Central-difference gradient estimates, evaluated in `f64`.
//!
//! This is the reference the analytic gradients are checked against, so it
//! stays deliberately naive: two evaluations of `f` per coordinate.

use crate::error::{Error, Result};

/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_at(&mut f, params, eps, 0..params.len())
}

/// Same estimate restricted to the listed coordinates, in the given order.
pub fn finite_diff_at<F, I>(f: &mut F, params: &[f64], eps: f64, coords: I) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
    I: IntoIterator<Item = usize>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!("finite-difference step {eps} must be > 0")));
    }
    let mut probe = params.to_vec();
    coords
        .into_iter()
        .map(|i| {
            if i >= params.len() {
                return Err(Error::contract(format!("coordinate {i} out of range")));
            }
            probe[i] = params[i] + eps;
            let up = f(&probe);
            probe[i] = params[i] - eps;
            let down = f(&probe);
            probe[i] = params[i];
            let g = (up - down) / (2.0 * eps);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::Numerical(format!("non-finite difference at coordinate {i}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_slope() {
        let g = finite_diff_gradient(|p| p[0], &[0.3], 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|p| p[0] * p[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant_has_zero_slope() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 5.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(finite_diff_gradient(|p| p[0], &[1.0], 0.0).is_err());
    }
}
