//! Scalar prior densities and their derivatives. Hand-rolled (including a Lanczos
//! log-gamma) so that test oracles built on external statistics crates stay
//! independent of this code.

use serde::{Deserialize, Serialize};

use crate::gp::LOG_2PI;

/// Hyperprior constants for every regime. Defaults: Gamma(2, 1) on all lengthscales
/// and on the intertask amplitudes, Half-Normal(1) on the map amplitude,
/// Half-Normal(2) on the noise-GP amplitude, Normal(-0.9, 1) on the log-noise mean,
/// Uniform(0, 10) on intertask slopes and Uniform(-1, 1) on intercepts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConstants {
    pub lengthscale_shape: f64,
    pub lengthscale_rate: f64,
    pub alpha_scale: f64,
    pub noise_mean_loc: f64,
    pub noise_mean_scale: f64,
    pub noise_alpha_scale: f64,
    pub noise_lengthscale_shape: f64,
    pub noise_lengthscale_rate: f64,
    pub intertask_amplitude_shape: f64,
    pub intertask_amplitude_rate: f64,
    pub intertask_lengthscale_shape: f64,
    pub intertask_lengthscale_rate: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    pub intercept_lo: f64,
    pub intercept_hi: f64,
}

impl Default for PriorConstants {
    fn default() -> Self {
        Self {
            lengthscale_shape: 2.0,
            lengthscale_rate: 1.0,
            alpha_scale: 1.0,
            noise_mean_loc: -0.9,
            noise_mean_scale: 1.0,
            noise_alpha_scale: 2.0,
            noise_lengthscale_shape: 2.0,
            noise_lengthscale_rate: 1.0,
            intertask_amplitude_shape: 2.0,
            intertask_amplitude_rate: 1.0,
            intertask_lengthscale_shape: 2.0,
            intertask_lengthscale_rate: 1.0,
            slope_lo: 0.0,
            slope_hi: 10.0,
            intercept_lo: -1.0,
            intercept_hi: 1.0,
        }
    }
}

/// Lanczos approximation (g = 7, 9 coefficients), |relative error| < 1e-13 on x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * LOG_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// log Gamma(x; shape, rate) for x > 0.
pub fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// d/dx log Gamma(x; shape, rate).
pub fn gamma_dlpdf(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) / x - rate
}

pub fn normal_lpdf(x: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    -0.5 * LOG_2PI - scale.ln() - 0.5 * z * z
}

pub fn normal_dlpdf(x: f64, loc: f64, scale: f64) -> f64 {
    -(x - loc) / (scale * scale)
}

/// Half-Normal with scale s: density 2 N(x; 0, s^2) on x >= 0.
pub fn half_normal_lpdf(x: f64, scale: f64) -> f64 {
    (2.0f64).ln() + normal_lpdf(x, 0.0, scale)
}

pub fn half_normal_dlpdf(x: f64, scale: f64) -> f64 {
    -x / (scale * scale)
}

pub fn uniform_lpdf(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        -(hi - lo).ln()
    } else {
        f64::NEG_INFINITY
    }
}
