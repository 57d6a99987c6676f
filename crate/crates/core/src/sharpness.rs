//! Sharpness of the loss surface and the update steps built on it.
//!
//! Sharpness is the first-order estimate of the largest loss increase inside
//! an L2 ball of radius `rho`: the loss is evaluated at the point reached by
//! moving `rho` along the normalized gradient.

use crate::error::{Error, Result};
use crate::nn::{GradientVector, Objective, ParameterVector};

/// Gradients with a smaller L2 norm are treated as exact stationary points.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector {
    pub values: Vec<f64>,
    pub rho: f64,
    /// Set when the gradient norm was below [`ZERO_GRADIENT_NORM`] and the
    /// perturbation was forced to zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessValue {
    pub value: f64,
    pub rho: f64,
    pub n_samples: usize,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

/// `rho * g / ||g||`, or zero with the degenerate flag when `g` vanishes.
pub fn optimal_perturbation(grad: &GradientVector, rho: f64) -> Result<PerturbationVector> {
    check_positive("rho", rho)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = grad.norm();
    if norm <= ZERO_GRADIENT_NORM {
        return Ok(PerturbationVector {
            values: vec![0.0; grad.len()],
            rho,
            degenerate: true,
        });
    }
    let scale = rho / norm;
    Ok(PerturbationVector {
        values: grad.as_slice().iter().map(|g| g * scale).collect(),
        rho,
        degenerate: false,
    })
}

/// Sharpness of `objective` at `params`: `loss(params + eps*) - loss(params)`
/// where `eps*` comes from the full-objective gradient.
pub fn sharpness(
    objective: &dyn Objective,
    params: &ParameterVector,
    rho: f64,
    n_samples: usize,
) -> Result<SharpnessValue> {
    Ok(sharpness_and_loss(objective, params, rho, n_samples)?.0)
}

/// Sharpness together with the unperturbed loss it was measured against.
pub fn sharpness_and_loss(
    objective: &dyn Objective,
    params: &ParameterVector,
    rho: f64,
    n_samples: usize,
) -> Result<(SharpnessValue, f64)> {
    check_positive("rho", rho)?;
    let (base, grad) = objective.loss_and_grad(params)?;
    let eps = optimal_perturbation(&grad, rho)?;
    let value = if eps.degenerate {
        0.0
    } else {
        objective.loss(&params.offset(&eps.values, 1.0))? - base
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("sharpness"));
    }
    Ok((SharpnessValue { value, rho, n_samples }, base))
}

/// Plain gradient step `theta - eta * grad`.
pub fn plain_step(objective: &dyn Objective, params: &ParameterVector, eta: f64) -> Result<ParameterVector> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eta must be finite and >= 0, got {eta}"
        )));
    }
    let (_, grad) = objective.loss_and_grad(params)?;
    Ok(params.offset(grad.as_slice(), -eta))
}

/// Sharpness-aware step: the gradient is taken at `theta + eps*` and applied
/// at `theta`. Falls back to [`plain_step`] when `eps*` is degenerate.
pub fn sam_step(objective: &dyn Objective, params: &ParameterVector, rho: f64, eta: f64) -> Result<ParameterVector> {
    check_positive("rho", rho)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eta must be finite and >= 0, got {eta}"
        )));
    }
    let (_, g1) = objective.loss_and_grad(params)?;
    let eps = optimal_perturbation(&g1, rho)?;
    if eps.degenerate {
        return Ok(params.offset(g1.as_slice(), -eta));
    }
    let (_, g2) = objective.loss_and_grad(&params.offset(&eps.values, 1.0))?;
    Ok(params.offset(g2.as_slice(), -eta))
}

/// Closed-form objectives with known sharpness, used by tests and the
/// verification suite.
pub mod toys {
    use super::*;

    /// `0.5 * curvature * ||theta||^2`
    pub struct Quadratic {
        pub dim: usize,
        pub curvature: f64,
    }

    impl Objective for Quadratic {
        fn num_params(&self) -> usize {
            self.dim
        }
        fn loss(&self, p: &ParameterVector) -> Result<f64> {
            Ok(0.5 * self.curvature * p.as_slice().iter().map(|v| v * v).sum::<f64>())
        }
        fn loss_and_grad(&self, p: &ParameterVector) -> Result<(f64, GradientVector)> {
            Ok((
                self.loss(p)?,
                GradientVector::new(p.as_slice().iter().map(|v| self.curvature * v).collect()),
            ))
        }
    }

    /// `a . theta`
    pub struct Linear {
        pub slope: Vec<f64>,
    }

    impl Objective for Linear {
        fn num_params(&self) -> usize {
            self.slope.len()
        }
        fn loss(&self, p: &ParameterVector) -> Result<f64> {
            Ok(self.slope.iter().zip(p.as_slice()).map(|(a, t)| a * t).sum())
        }
        fn loss_and_grad(&self, p: &ParameterVector) -> Result<(f64, GradientVector)> {
            Ok((self.loss(p)?, GradientVector::new(self.slope.clone())))
        }
    }
}
