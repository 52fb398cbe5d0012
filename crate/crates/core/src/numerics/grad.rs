//! The differentiation contract and its finite-difference check.

use crate::error::{Error, Result};

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[f64]) -> Result<f64>;

    /// Value and `d value / d params`, same length as `params`.
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<V, G> Differentiable for (V, G)
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok((self.0)(params))
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.0)(params), (self.1)(params)))
    }
}

/// Max over parameters of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F: Differentiable + ?Sized>(f: &F, params: &[f64], eps: f64) -> Result<f64> {
    grad_check_indices(f, params, eps, 0..params.len())
}

/// [`grad_check`] restricted to a subset of parameter indices.
pub fn grad_check_indices<F: Differentiable + ?Sized>(
    f: &F,
    params: &[f64],
    eps: f64,
    indices: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (_, analytic) = f.value_and_grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if let Some(bad) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(bad));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in indices {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f.value(&probe)?;
        probe[i] = orig - eps;
        let down = f.value(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = (|p: &[f64]| p[0] * p[0], |p: &[f64]| vec![2.0 * p[0]]);
        let err = grad_check(&f, &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let f = (|_: &[f64]| 4.2, |p: &[f64]| vec![0.0; p.len()]);
        assert_eq!(grad_check(&f, &[1.0, -2.0, 0.5], 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = (|p: &[f64]| p[0].sin(), |p: &[f64]| vec![p[0].sin()]);
        assert!(grad_check(&f, &[0.3], 1e-5).unwrap() > 0.1);
    }

    #[test]
    fn non_finite_gradient_errors() {
        let f = (|_: &[f64]| 0.0, |_: &[f64]| vec![f64::NAN]);
        assert!(matches!(grad_check(&f, &[0.0], 1e-5), Err(Error::NonFiniteGradient(0))));
    }
}
