//! Kernel functions, mean functions, Gaussian marginal likelihood, and exact GP
//! conditioning. Everything here is a pure function of its inputs; all solves go
//! through a Cholesky factor, never an explicit inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;
pub const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Jitter ladder: relative start and cap, plus an absolute floor so that
/// near-zero-amplitude kernels (mean diagonal ~ 0) still get a repairable matrix.
pub(crate) const JITTER_REL_START: f64 = 1e-9;
const JITTER_REL_MAX: f64 = 1e-4;
pub(crate) const JITTER_ABS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(
        "Cholesky factorization failed after jitter escalation \
         (n = {n}, mean diagonal = {mean_diag:.6e}, last jitter tried = {last_jitter:.6e})"
    )]
    CholeskyFailed {
        n: usize,
        mean_diag: f64,
        last_jitter: f64,
    },
}

/// Input point with a Euclidean distance. A single lengthscale covers every
/// coordinate, so kernels only ever see scalar distances.
pub trait Input: Copy + Sync {
    fn dist(&self, other: &Self) -> f64;
}

impl Input for f64 {
    fn dist(&self, other: &f64) -> f64 {
        (self - other).abs()
    }
}

impl Input for [f64; 2] {
    fn dist(&self, other: &[f64; 2]) -> f64 {
        let dx = self[0] - other[0];
        let dy = self[1] - other[1];
        (dx * dx + dy * dy).sqrt()
    }
}

fn matern32_unchecked(dist: f64, amplitude: f64, lengthscale: f64) -> f64 {
    let s = SQRT_3 * dist / lengthscale;
    amplitude * amplitude * (1.0 + s) * (-s).exp()
}

/// Matérn 3/2 covariance between two points at distance `dist`:
/// α²(1 + √3 d / l) exp(−√3 d / l).
pub fn matern32(dist: f64, amplitude: f64, lengthscale: f64) -> Result<f64, GpError> {
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(GpError::NonPositive {
            name: "amplitude",
            value: amplitude,
        });
    }
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(GpError::NonPositive {
            name: "lengthscale",
            value: lengthscale,
        });
    }
    Ok(matern32_unchecked(dist, amplitude, lengthscale))
}

/// Stationary Matérn 3/2 kernel with positive amplitude (process std. dev.) and
/// lengthscale, validated at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matern32Kernel {
    amplitude: f64,
    lengthscale: f64,
}

impl Matern32Kernel {
    pub fn new(amplitude: f64, lengthscale: f64) -> Result<Self, GpError> {
        matern32(0.0, amplitude, lengthscale)?;
        Ok(Self {
            amplitude,
            lengthscale,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn value(&self, dist: f64) -> f64 {
        matern32_unchecked(dist, self.amplitude, self.lengthscale)
    }
}

/// Zero, constant, or linear mean. The linear form is defined on scalar inputs
/// (it is only used over sensor separations).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeanFunction {
    Zero,
    Constant(f64),
    Linear { slope: f64, intercept: f64 },
}

impl MeanFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Constant(c) => *c,
            MeanFunction::Linear { slope, intercept } => slope * x + intercept,
        }
    }

    pub fn eval_vec(&self, xs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|x| self.eval(*x)))
    }
}

/// Gram matrix over `inputs`: M[i,j] = k(|x_i − x_j|) plus, on the diagonal,
/// the squared per-point observation noise if given.
pub fn gram_matrix<I: Input>(
    inputs: &[I],
    kernel: &Matern32Kernel,
    noise_diag: Option<&[f64]>,
) -> Result<DMatrix<f64>, GpError> {
    let n = inputs.len();
    if let Some(nd) = noise_diag {
        if nd.len() != n {
            return Err(GpError::DimensionMismatch {
                context: format!("noise_diag has {} entries for {} inputs", nd.len(), n),
            });
        }
        if let Some(bad) = nd.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(GpError::NonPositive {
                name: "noise_diag entry",
                value: *bad,
            });
        }
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = kernel.value(0.0);
        for j in (i + 1)..n {
            let v = kernel.value(inputs[i].dist(&inputs[j]));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    if let Some(nd) = noise_diag {
        for i in 0..n {
            m[(i, i)] += nd[i] * nd[i];
        }
    }
    Ok(m)
}

/// Cross-covariance block between two input sets.
pub fn cross_gram<I: Input>(
    rows: &[I],
    cols: &[I],
    kernel: &Matern32Kernel,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        kernel.value(rows[i].dist(&cols[j]))
    })
}

/// Factor `sigma + jitter I`. With `try_exact_first` the zero-jitter attempt comes
/// first (conditioning paths); otherwise the ladder starts at the documented
/// 1e−9 relative level (likelihood paths).
pub(crate) fn chol_jittered(
    sigma: &DMatrix<f64>,
    try_exact_first: bool,
) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let n = sigma.nrows();
    if n == 0 {
        let c = Cholesky::new(DMatrix::zeros(0, 0)).expect("empty Cholesky");
        return Ok((c, 0.0));
    }
    let mean_diag = sigma.diagonal().sum() / n as f64;
    if try_exact_first {
        if let Some(c) = Cholesky::new(sigma.clone()) {
            return Ok((c, 0.0));
        }
    }
    if !mean_diag.is_finite() {
        return Err(GpError::CholeskyFailed {
            n,
            mean_diag,
            last_jitter: 0.0,
        });
    }
    let mut jitter = (JITTER_REL_START * mean_diag).max(JITTER_ABS_FLOOR);
    let jitter_max = (JITTER_REL_MAX * mean_diag).max(JITTER_ABS_FLOOR * 1e5);
    loop {
        let mut m = sigma.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        if jitter >= jitter_max {
            return Err(GpError::CholeskyFailed {
                n,
                mean_diag,
                last_jitter: jitter,
            });
        }
        jitter *= 10.0;
    }
}

/// Cached Cholesky of one covariance matrix plus the solve against one residual:
/// everything a Gaussian log-density and its gradient reuse.
pub struct GramBundle {
    chol: Cholesky<f64, Dyn>,
    /// log |Σ + jitter·I|
    pub log_det: f64,
    /// (Σ + jitter·I)⁻¹ (y − m) for the residual the bundle was built with
    pub alpha_vec: DVector<f64>,
    /// jitter actually applied to the diagonal
    pub jitter: f64,
    quad: f64,
    n: usize,
}

impl GramBundle {
    /// Factor `sigma` (jitter ladder from the 1e−9 relative level) and solve `resid`.
    pub fn build(sigma: &DMatrix<f64>, resid: &DVector<f64>) -> Result<Self, GpError> {
        let n = sigma.nrows();
        if sigma.ncols() != n || resid.len() != n {
            return Err(GpError::DimensionMismatch {
                context: format!(
                    "covariance {}x{} with residual of length {}",
                    sigma.nrows(),
                    sigma.ncols(),
                    resid.len()
                ),
            });
        }
        let (chol, jitter) = chol_jittered(sigma, false)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
        let alpha_vec = chol.solve(resid);
        let quad = resid.dot(&alpha_vec);
        Ok(Self {
            chol,
            log_det,
            alpha_vec,
            jitter,
            quad,
            n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Gaussian log-density of the residual the bundle was built with.
    pub fn log_density(&self) -> f64 {
        -0.5 * (self.n as f64) * LOG_2PI - 0.5 * self.log_det - 0.5 * self.quad
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// (Σ + jitter·I)⁻¹, materialized through the cached factor. Used for the
    /// trace identities in gradients, not for solving.
    pub fn inv(&self) -> DMatrix<f64> {
        self.chol.solve(&DMatrix::identity(self.n, self.n))
    }

    /// Lower-triangular factor (copy).
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// log N(y; mean, Σ) through a bundle built from the same Σ. The solve against
/// (y − mean) is recomputed, so any residual may be scored against the factor.
pub fn gaussian_log_density(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    bundle: &GramBundle,
) -> Result<f64, GpError> {
    if y.len() != bundle.n || mean.len() != bundle.n {
        return Err(GpError::DimensionMismatch {
            context: format!(
                "y len {} / mean len {} against bundle of size {}",
                y.len(),
                mean.len(),
                bundle.n
            ),
        });
    }
    let resid = y - mean;
    let alpha = bundle.solve_vec(&resid);
    Ok(-0.5 * (bundle.n as f64) * LOG_2PI - 0.5 * bundle.log_det - 0.5 * resid.dot(&alpha))
}

/// Condition a joint Gaussian [x; y] with cov blocks [[A, C], [Cᵀ, B]] on y = y_obs:
/// mean μ_x + C B⁻¹ (y_obs − μ_y), covariance A − C B⁻¹ Cᵀ (symmetrized).
pub fn condition(
    joint_mean_x: &DVector<f64>,
    joint_mean_y: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    let p = joint_mean_x.len();
    let q = joint_mean_y.len();
    if a.nrows() != p || a.ncols() != p || b.nrows() != q || b.ncols() != q {
        return Err(GpError::DimensionMismatch {
            context: format!("A is {}x{}, B is {}x{}, expected {p}x{p} and {q}x{q}",
                a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        });
    }
    if c.nrows() != p || c.ncols() != q || y_obs.len() != q {
        return Err(GpError::DimensionMismatch {
            context: format!(
                "C is {}x{} with y_obs of length {}, expected {p}x{q} and {q}",
                c.nrows(),
                c.ncols(),
                y_obs.len()
            ),
        });
    }
    if q == 0 {
        return Ok((joint_mean_x.clone(), a.clone()));
    }
    let (chol, _) = chol_jittered(b, true)?;
    let resid = y_obs - joint_mean_y;
    let mean = joint_mean_x + c * chol.solve(&resid);
    let w = chol.solve(&c.transpose());
    let cov_raw = a - c * w;
    let cov = 0.5 * (&cov_raw + cov_raw.transpose());
    Ok((mean, cov))
}

/// Exact zero-mean GP prediction: condition the joint Gram over train ∪ test on the
/// training observations. The returned covariance includes the squared test-point
/// observation noise on its diagonal, so it is the predictive law of new observations.
pub fn gp_predict<I: Input>(
    train_inputs: &[I],
    train_outputs: &[f64],
    test_inputs: &[I],
    kernel: &Matern32Kernel,
    noise_at_train: &[f64],
    noise_at_test: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    if train_inputs.len() != train_outputs.len() {
        return Err(GpError::DimensionMismatch {
            context: format!(
                "{} train inputs with {} outputs",
                train_inputs.len(),
                train_outputs.len()
            ),
        });
    }
    if noise_at_test.len() != test_inputs.len() {
        return Err(GpError::DimensionMismatch {
            context: format!(
                "noise_at_test has {} entries for {} test inputs",
                noise_at_test.len(),
                test_inputs.len()
            ),
        });
    }
    let a = gram_matrix(test_inputs, kernel, Some(noise_at_test))?;
    let b = gram_matrix(train_inputs, kernel, Some(noise_at_train))?;
    let c = cross_gram(test_inputs, train_inputs, kernel);
    let zero_x = DVector::zeros(test_inputs.len());
    let zero_y = DVector::zeros(train_inputs.len());
    let y = DVector::from_column_slice(train_outputs);
    condition(&zero_x, &zero_y, &a, &b, &c, &y)
}

/// GP conditioning with an explicit mean function and exactly observed latent values
/// (used to read a latent field or an intertask function at new inputs). A nugget of
/// max(1e−9·mean diag, 1e−12) stabilizes the train block, so a vanishing kernel
/// amplitude collapses the prediction to the mean function.
pub fn gp_condition_with_mean<I: Input>(
    train_inputs: &[I],
    train_values: &[f64],
    test_inputs: &[I],
    kernel: &Matern32Kernel,
    mean_train: &DVector<f64>,
    mean_test: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    if train_inputs.len() != train_values.len() || mean_train.len() != train_inputs.len() {
        return Err(GpError::DimensionMismatch {
            context: format!(
                "{} train inputs, {} values, {} means",
                train_inputs.len(),
                train_values.len(),
                mean_train.len()
            ),
        });
    }
    let a = gram_matrix(test_inputs, kernel, None)?;
    let mut b = gram_matrix(train_inputs, kernel, None)?;
    let n = b.nrows();
    if n > 0 {
        let nugget = (JITTER_REL_START * b.diagonal().sum() / n as f64).max(JITTER_ABS_FLOOR);
        for i in 0..n {
            b[(i, i)] += nugget;
        }
    }
    let c = cross_gram(test_inputs, train_inputs, kernel);
    let v = DVector::from_column_slice(train_values);
    condition(mean_test, mean_train, &a, &b, &c, &v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rejects_nonpositive_parameters() {
        assert!(matern32(1.0, 0.0, 1.0).is_err());
        assert!(matern32(1.0, 1.0, -2.0).is_err());
        assert!(Matern32Kernel::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn chol_ladder_repairs_zero_matrix() {
        // mean diag 0: only the absolute floor can make this factorable
        let z = DMatrix::zeros(3, 3);
        let (_, jitter) = chol_jittered(&z, false).unwrap();
        assert!(jitter >= 1e-12);
    }

    #[test]
    fn chol_ladder_reports_failure() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        m[(0, 1)] = 2.0;
        m[(1, 0)] = 2.0;
        // indefinite with eigenvalue -1: the capped ladder cannot repair it
        let err = chol_jittered(&m, false).unwrap_err();
        match err {
            GpError::CholeskyFailed { n, .. } => assert_eq!(n, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
