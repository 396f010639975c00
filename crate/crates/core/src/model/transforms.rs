//! Bijections between constrained parameters and the sampler's unconstrained space,
//! with log-Jacobians accumulated into the target density.

use super::{sigmoid, softplus, HyperParams, ModelError};

/// Per-coordinate transform from unconstrained u to constrained x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// x = exp(u), for positive parameters.
    Log,
    /// x = lo + (hi - lo) * sigmoid(u), for uniform-support parameters.
    ScaledLogit { lo: f64, hi: f64 },
}

impl Transform {
    pub fn constrain(&self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::ScaledLogit { lo, hi } => lo + (hi - lo) * sigmoid(u),
        }
    }

    pub fn unconstrain(&self, x: f64, name: &str) -> Result<f64, ModelError> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Log => {
                if x > 0.0 && x.is_finite() {
                    Ok(x.ln())
                } else {
                    Err(ModelError::OutOfSupport {
                        name: name.to_string(),
                        value: x,
                    })
                }
            }
            Transform::ScaledLogit { lo, hi } => {
                if x > *lo && x < *hi {
                    Ok(((x - lo) / (hi - x)).ln())
                } else {
                    Err(ModelError::OutOfSupport {
                        name: name.to_string(),
                        value: x,
                    })
                }
            }
        }
    }

    /// log |d constrain / du| at u.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            // ln(hi-lo) + ln sigmoid(u) + ln sigmoid(-u)
            Transform::ScaledLogit { lo, hi } => (hi - lo).ln() - softplus(-u) - softplus(u),
        }
    }

    /// d log_jacobian / du at u.
    pub fn grad_log_jacobian(&self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => 1.0,
            Transform::ScaledLogit { .. } => 1.0 - 2.0 * sigmoid(u),
        }
    }
}

/// Unconstrained coordinates of one task's hyperparameters, in layout order
/// [lengthscale, alpha, noise_mean, noise_alpha, noise_lengthscale].
pub fn unconstrain_hyperparams(h: &HyperParams) -> Result<[f64; 5], ModelError> {
    Ok([
        Transform::Log.unconstrain(h.lengthscale, "lengthscale")?,
        Transform::Log.unconstrain(h.alpha, "alpha")?,
        h.noise_mean,
        Transform::Log.unconstrain(h.noise_alpha, "noise_alpha")?,
        Transform::Log.unconstrain(h.noise_lengthscale, "noise_lengthscale")?,
    ])
}

/// Inverse of [`unconstrain_hyperparams`].
pub fn constrain_hyperparams(u: &[f64; 5]) -> HyperParams {
    HyperParams {
        lengthscale: u[0].exp(),
        alpha: u[1].exp(),
        noise_mean: u[2],
        noise_alpha: u[3].exp(),
        noise_lengthscale: u[4].exp(),
    }
}
