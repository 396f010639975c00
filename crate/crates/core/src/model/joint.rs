//! Centered log-joint densities for the three regimes, split into additive pieces so
//! tests can compare parts across regimes. The map function f is always marginalized
//! analytically; the log-noise field r enters as explicit latent values here.

use nalgebra::{DMatrix, DVector};

use crate::datagen::TaskDataset;
use crate::gp::{gram_matrix, GramBundle, Matern32Kernel};

use super::priors::{
    gamma_lpdf, half_normal_lpdf, normal_lpdf, uniform_lpdf, PriorConstants,
};
use super::{softplus, HyperParams, IntertaskParams, LatentNoiseField, ModelError};

/// Additive pieces of a log-joint. `total` is the density the sampler sees (up to
/// the non-centered reparameterization's Jacobian, handled in the target module).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointBreakdown {
    /// All hyperprior terms, including the log-Jacobians of the unconstraining
    /// transforms.
    pub prior: f64,
    /// Densities of the intertask latent vectors g and h (MTL-B only, else 0).
    pub intertask_gp: f64,
    /// Sum over tasks of the latent log-noise GP densities.
    pub noise_gp: f64,
    /// Sum over tasks of the marginal Gaussian likelihoods N(y; 0, K_f + diag(e^2r)).
    pub likelihood: f64,
}

impl JointBreakdown {
    pub fn total(&self) -> f64 {
        self.prior + self.intertask_gp + self.noise_gp + self.likelihood
    }
}

/// Hyperprior of one task's parameter set: Gamma on the lengthscales, Half-Normal on
/// the amplitudes, Normal on the log-noise mean, plus the log-Jacobians of the log
/// transforms of the positive parameters (evaluated at the constrained values).
pub fn log_prior_stl(hypers: &HyperParams, pc: &PriorConstants) -> f64 {
    gamma_lpdf(hypers.lengthscale, pc.lengthscale_shape, pc.lengthscale_rate)
        + hypers.lengthscale.ln()
        + half_normal_lpdf(hypers.alpha, pc.alpha_scale)
        + hypers.alpha.ln()
        + normal_lpdf(hypers.noise_mean, pc.noise_mean_loc, pc.noise_mean_scale)
        + half_normal_lpdf(hypers.noise_alpha, pc.noise_alpha_scale)
        + hypers.noise_alpha.ln()
        + gamma_lpdf(
            hypers.noise_lengthscale,
            pc.noise_lengthscale_shape,
            pc.noise_lengthscale_rate,
        )
        + hypers.noise_lengthscale.ln()
}

/// Noise-GP density and marginal likelihood of one task at fixed hyperparameters and
/// latent noise values (over the task's training points).
fn task_terms(
    data: &TaskDataset,
    alpha: f64,
    lengthscale: f64,
    noise_mean: f64,
    noise_alpha: f64,
    noise_lengthscale: f64,
    noise: &LatentNoiseField,
) -> Result<(f64, f64), ModelError> {
    let inputs = data.train_inputs();
    let y = data.train_outputs();
    let n = inputs.len();
    if noise.r_values.len() != n {
        return Err(ModelError::Dimension {
            context: format!(
                "task {} has {n} training observations but {} latent noise values",
                data.pair_label(),
                noise.r_values.len()
            ),
        });
    }
    let noise_kernel = Matern32Kernel::new(noise_alpha, noise_lengthscale)?;
    let k_r = gram_matrix(&inputs, &noise_kernel, None)?;
    let r = DVector::from_column_slice(&noise.r_values);
    let r_resid = r.map(|ri| ri - noise_mean);
    let bundle_r = GramBundle::build(&k_r, &r_resid)?;
    let lp_noise = bundle_r.log_density();

    let kernel = Matern32Kernel::new(alpha, lengthscale)?;
    let mut sigma = gram_matrix(&inputs, &kernel, None)?;
    for i in 0..n {
        let s = noise.r_values[i].exp();
        sigma[(i, i)] += s * s;
    }
    let y_vec = DVector::from_column_slice(&y);
    let bundle = GramBundle::build(&sigma, &y_vec)?;
    Ok((lp_noise, bundle.log_density()))
}

/// Independent single-task log-joint: hyperprior + noise-GP density + marginal
/// Gaussian likelihood over the task's training points.
pub fn log_joint_stl(
    data: &TaskDataset,
    hypers: &HyperParams,
    noise: &LatentNoiseField,
    pc: &PriorConstants,
) -> Result<JointBreakdown, ModelError> {
    let (lp_noise, lp_lik) = task_terms(
        data,
        hypers.alpha,
        hypers.lengthscale,
        hypers.noise_mean,
        hypers.noise_alpha,
        hypers.noise_lengthscale,
        noise,
    )?;
    Ok(JointBreakdown {
        prior: log_prior_stl(hypers, pc),
        intertask_gp: 0.0,
        noise_gp: lp_noise,
        likelihood: lp_lik,
    })
}

/// Shared-hyperparameter log-joint: one hyperprior, every task scored under the same
/// parameter set, with its own latent noise field.
pub fn log_joint_mtl_a(
    datasets: &[TaskDataset],
    hypers: &HyperParams,
    noises: &[LatentNoiseField],
    pc: &PriorConstants,
) -> Result<JointBreakdown, ModelError> {
    if datasets.len() != noises.len() {
        return Err(ModelError::Dimension {
            context: format!(
                "{} datasets with {} noise fields",
                datasets.len(),
                noises.len()
            ),
        });
    }
    let mut noise_gp = 0.0;
    let mut likelihood = 0.0;
    for (data, noise) in datasets.iter().zip(noises) {
        let (lp_noise, lp_lik) = task_terms(
            data,
            hypers.alpha,
            hypers.lengthscale,
            hypers.noise_mean,
            hypers.noise_alpha,
            hypers.noise_lengthscale,
            noise,
        )?;
        noise_gp += lp_noise;
        likelihood += lp_lik;
    }
    Ok(JointBreakdown {
        prior: log_prior_stl(hypers, pc),
        intertask_gp: 0.0,
        noise_gp,
        likelihood,
    })
}

/// Intertask-GP log-joint. Per-task kernel parameters are softplus(g_k) and
/// softplus(h_k); g and h follow GPs over sensor separation with linear means; the
/// noise hyperparameters are one shared set. Slope or intercept outside the uniform
/// support yields -inf (a rejected state), not an error.
#[allow(clippy::too_many_arguments)]
pub fn log_joint_mtl_b(
    datasets: &[TaskDataset],
    separations: &[f64],
    inter: &IntertaskParams,
    shared_noise_hypers: (f64, f64, f64),
    noises: &[LatentNoiseField],
    pc: &PriorConstants,
) -> Result<JointBreakdown, ModelError> {
    let k = datasets.len();
    if separations.len() != k
        || noises.len() != k
        || inter.g_values.len() != k
        || inter.h_values.len() != k
    {
        return Err(ModelError::Dimension {
            context: format!(
                "{k} datasets vs {} separations, {} noise fields, {} g values, {} h values",
                separations.len(),
                noises.len(),
                inter.g_values.len(),
                inter.h_values.len()
            ),
        });
    }
    let (noise_mean, noise_alpha, noise_lengthscale) = shared_noise_hypers;

    let mut prior = gamma_lpdf(
        inter.g_amplitude,
        pc.intertask_amplitude_shape,
        pc.intertask_amplitude_rate,
    ) + inter.g_amplitude.ln()
        + gamma_lpdf(
            inter.g_lengthscale,
            pc.intertask_lengthscale_shape,
            pc.intertask_lengthscale_rate,
        )
        + inter.g_lengthscale.ln()
        + gamma_lpdf(
            inter.h_amplitude,
            pc.intertask_amplitude_shape,
            pc.intertask_amplitude_rate,
        )
        + inter.h_amplitude.ln()
        + gamma_lpdf(
            inter.h_lengthscale,
            pc.intertask_lengthscale_shape,
            pc.intertask_lengthscale_rate,
        )
        + inter.h_lengthscale.ln()
        + uniform_lpdf(inter.g_slope, pc.slope_lo, pc.slope_hi)
        + uniform_lpdf(inter.h_slope, pc.slope_lo, pc.slope_hi)
        + uniform_lpdf(inter.g_intercept, pc.intercept_lo, pc.intercept_hi)
        + uniform_lpdf(inter.h_intercept, pc.intercept_lo, pc.intercept_hi);
    // Jacobians of the scaled-logit transforms, defined only inside the support.
    if prior.is_finite() {
        prior += scaled_logit_jacobian(inter.g_slope, pc.slope_lo, pc.slope_hi)
            + scaled_logit_jacobian(inter.h_slope, pc.slope_lo, pc.slope_hi)
            + scaled_logit_jacobian(inter.g_intercept, pc.intercept_lo, pc.intercept_hi)
            + scaled_logit_jacobian(inter.h_intercept, pc.intercept_lo, pc.intercept_hi);
    }
    prior += normal_lpdf(noise_mean, pc.noise_mean_loc, pc.noise_mean_scale)
        + half_normal_lpdf(noise_alpha, pc.noise_alpha_scale)
        + noise_alpha.ln()
        + gamma_lpdf(
            noise_lengthscale,
            pc.noise_lengthscale_shape,
            pc.noise_lengthscale_rate,
        )
        + noise_lengthscale.ln();

    if !prior.is_finite() {
        return Ok(JointBreakdown {
            prior: f64::NEG_INFINITY,
            intertask_gp: 0.0,
            noise_gp: 0.0,
            likelihood: 0.0,
        });
    }

    let intertask_gp = intertask_density(
        separations,
        &inter.g_values,
        inter.g_amplitude,
        inter.g_lengthscale,
        inter.g_slope,
        inter.g_intercept,
    )? + intertask_density(
        separations,
        &inter.h_values,
        inter.h_amplitude,
        inter.h_lengthscale,
        inter.h_slope,
        inter.h_intercept,
    )?;

    let mut noise_gp = 0.0;
    let mut likelihood = 0.0;
    for ((data, noise), (g, h)) in datasets
        .iter()
        .zip(noises)
        .zip(inter.g_values.iter().zip(&inter.h_values))
    {
        let (lp_noise, lp_lik) = task_terms(
            data,
            softplus(*g),
            softplus(*h),
            noise_mean,
            noise_alpha,
            noise_lengthscale,
            noise,
        )?;
        noise_gp += lp_noise;
        likelihood += lp_lik;
    }
    Ok(JointBreakdown {
        prior,
        intertask_gp,
        noise_gp,
        likelihood,
    })
}

fn scaled_logit_jacobian(x: f64, lo: f64, hi: f64) -> f64 {
    // log |d constrain/du| expressed through the constrained value:
    // (hi-lo) sigmoid(u) sigmoid(-u) = (x-lo)(hi-x)/(hi-lo)
    ((x - lo) * (hi - x) / (hi - lo)).ln()
}

fn intertask_density(
    separations: &[f64],
    values: &[f64],
    amplitude: f64,
    lengthscale: f64,
    slope: f64,
    intercept: f64,
) -> Result<f64, ModelError> {
    let kernel = Matern32Kernel::new(amplitude, lengthscale)?;
    let k = gram_matrix(separations, &kernel, None)?;
    let resid = DVector::from_iterator(
        separations.len(),
        separations
            .iter()
            .zip(values)
            .map(|(s, v)| v - (slope * s + intercept)),
    );
    Ok(GramBundle::build(&k, &resid)?.log_density())
}

/// Kernel matrix from a precomputed distance matrix.
pub(crate) fn kernel_from_dists(dists: &DMatrix<f64>, kernel: &Matern32Kernel) -> DMatrix<f64> {
    dists.map(|d| kernel.value(d))
}
