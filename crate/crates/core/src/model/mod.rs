//! The three pooling regimes (independent, shared, intertask-GP), their priors and
//! transforms, and the differentiable unconstrained log-joint each exposes to the
//! sampler.

pub mod joint;
pub mod priors;
pub mod target;
pub mod transforms;

pub use joint::{
    log_joint_mtl_a, log_joint_mtl_b, log_joint_stl, log_prior_stl, JointBreakdown,
};
pub use priors::PriorConstants;
pub use target::{MtlATarget, MtlBTarget, ParamLayout, StlTarget};
pub use transforms::{
    constrain_hyperparams, unconstrain_hyperparams, Transform,
};

use crate::gp::GpError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter {name} = {value} lies outside its support")]
    OutOfSupport { name: String, value: f64 },
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("dimension mismatch: {context}")]
    Dimension { context: String },
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Pooling regime selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stl,
    MtlA,
    MtlB,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Stl => "stl",
            Regime::MtlA => "mtl_a",
            Regime::MtlB => "mtl_b",
        })
    }
}

/// Per-task hyperparameter set: map kernel (alpha, lengthscale) plus the latent
/// log-noise GP's constant mean and kernel (noise_alpha, noise_lengthscale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub lengthscale: f64,
    pub noise_mean: f64,
    pub noise_alpha: f64,
    pub noise_lengthscale: f64,
}

/// Intertask-GP parameters: two latent functions g (controls per-task alpha through
/// softplus) and h (per-task lengthscale), each with a Matérn 3/2 kernel and a linear
/// mean over sensor separation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntertaskParams {
    pub g_amplitude: f64,
    pub g_lengthscale: f64,
    pub g_slope: f64,
    pub g_intercept: f64,
    pub h_amplitude: f64,
    pub h_lengthscale: f64,
    pub h_slope: f64,
    pub h_intercept: f64,
    /// Latent function values at the training-task separations.
    pub g_values: Vec<f64>,
    pub h_values: Vec<f64>,
}

/// Latent log-noise values, one per training observation of one task. The
/// observation noise standard deviation is exp(r).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNoiseField {
    pub r_values: Vec<f64>,
}

/// Which regime to fit, with which prior constants, over how many tasks. The prior
/// constants are data: they are echoed into run metadata so overrides are visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub regime: Regime,
    pub priors: PriorConstants,
    pub task_count: usize,
}

/// Euclidean distance between two sensor locations in the shared normalised frame.
pub fn sensor_separation(s_g: [f64; 2], s_h: [f64; 2]) -> f64 {
    let dx = s_g[0] - s_h[0];
    let dy = s_g[1] - s_h[1];
    (dx * dx + dy * dy).sqrt()
}

/// Overflow-safe softplus: log(1 + exp(x)), linear above 30, exp below -30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
