//! Unconstrained posterior targets with analytic gradients.
//!
//! Every regime is expressed over R^D: positive hyperparameters through log,
//! bounded ones through a scaled logit, and each task's log-noise field
//! non-centered as r = noise_mean + L_r z with z standard normal, L_r the
//! Cholesky factor of that task's noise-GP covariance. The resulting density is
//! the centered joint plus sum(ln diag L_r) per task (change of variables).

use nalgebra::{DMatrix, DVector};

use crate::datagen::TaskDataset;
use crate::gp::{
    chol_jittered, Input, Matern32Kernel, JITTER_ABS_FLOOR, JITTER_REL_START, LOG_2PI, SQRT_3,
};

use super::joint::{kernel_from_dists, log_prior_stl};
use super::priors::{gamma_lpdf, half_normal_lpdf, normal_lpdf, uniform_lpdf, PriorConstants};
use super::transforms::{constrain_hyperparams, Transform};
use super::{sigmoid, softplus, HyperParams, IntertaskParams, LatentNoiseField, ModelError, Regime};

/// Beyond this magnitude an unconstrained header coordinate would push exp or
/// softplus into overflow territory; such states score -inf instead.
const HEADER_GUARD: f64 = 150.0;

const SHARED_HYPER_NAMES: [&str; 5] = [
    "lengthscale",
    "alpha",
    "noise_mean",
    "noise_alpha",
    "noise_lengthscale",
];

/// Name, ordering, and slicing conventions of one regime's parameter vector.
/// Unconstrained states and recorded (constrained) draws share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    regime: Regime,
    names: Vec<String>,
    task_sizes: Vec<usize>,
}

impl ParamLayout {
    pub fn stl(n_train: usize) -> Self {
        let mut names: Vec<String> = SHARED_HYPER_NAMES.iter().map(|s| s.to_string()).collect();
        for i in 0..n_train {
            names.push(format!("r[{i}]"));
        }
        Self {
            regime: Regime::Stl,
            names,
            task_sizes: vec![n_train],
        }
    }

    pub fn mtl_a(task_sizes: &[usize]) -> Self {
        let mut names: Vec<String> = SHARED_HYPER_NAMES.iter().map(|s| s.to_string()).collect();
        for (k, n) in task_sizes.iter().enumerate() {
            for i in 0..*n {
                names.push(format!("r{k}[{i}]"));
            }
        }
        Self {
            regime: Regime::MtlA,
            names,
            task_sizes: task_sizes.to_vec(),
        }
    }

    pub fn mtl_b(task_sizes: &[usize]) -> Self {
        let k = task_sizes.len();
        let mut names = Vec::new();
        for j in 0..k {
            names.push(format!("g[{j}]"));
        }
        for j in 0..k {
            names.push(format!("h[{j}]"));
        }
        for s in [
            "alpha_g",
            "lengthscale_g",
            "slope_g",
            "intercept_g",
            "alpha_h",
            "lengthscale_h",
            "slope_h",
            "intercept_h",
            "noise_mean",
            "noise_alpha",
            "noise_lengthscale",
        ] {
            names.push(s.to_string());
        }
        for (j, n) in task_sizes.iter().enumerate() {
            for i in 0..*n {
                names.push(format!("r{j}[{i}]"));
            }
        }
        Self {
            regime: Regime::MtlB,
            names,
            task_sizes: task_sizes.to_vec(),
        }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn task_count(&self) -> usize {
        self.task_sizes.len()
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.task_sizes
    }

    /// Length of the hyperparameter header before the latent noise blocks.
    pub fn header_len(&self) -> usize {
        match self.regime {
            Regime::Stl | Regime::MtlA => 5,
            Regime::MtlB => 2 * self.task_sizes.len() + 11,
        }
    }

    /// Offset of task `k`'s latent noise block.
    pub fn z_offset(&self, k: usize) -> usize {
        self.header_len() + self.task_sizes[..k].iter().sum::<usize>()
    }

    /// Per-task kernel and noise hyperparameters from one constrained row.
    pub fn hyperparams(&self, row: &[f64], task: usize) -> HyperParams {
        match self.regime {
            Regime::Stl | Regime::MtlA => HyperParams {
                lengthscale: row[0],
                alpha: row[1],
                noise_mean: row[2],
                noise_alpha: row[3],
                noise_lengthscale: row[4],
            },
            Regime::MtlB => {
                let k = self.task_sizes.len();
                HyperParams {
                    alpha: softplus(row[task]),
                    lengthscale: softplus(row[k + task]),
                    noise_mean: row[2 * k + 8],
                    noise_alpha: row[2 * k + 9],
                    noise_lengthscale: row[2 * k + 10],
                }
            }
        }
    }

    /// Task `k`'s latent log-noise values from one constrained row.
    pub fn noise_field(&self, row: &[f64], task: usize) -> LatentNoiseField {
        let off = self.z_offset(task);
        LatentNoiseField {
            r_values: row[off..off + self.task_sizes[task]].to_vec(),
        }
    }

    /// Intertask block from one constrained row (MTL-B rows only).
    pub fn intertask(&self, row: &[f64]) -> Option<IntertaskParams> {
        if self.regime != Regime::MtlB {
            return None;
        }
        let k = self.task_sizes.len();
        Some(IntertaskParams {
            g_values: row[..k].to_vec(),
            h_values: row[k..2 * k].to_vec(),
            g_amplitude: row[2 * k],
            g_lengthscale: row[2 * k + 1],
            g_slope: row[2 * k + 2],
            g_intercept: row[2 * k + 3],
            h_amplitude: row[2 * k + 4],
            h_lengthscale: row[2 * k + 5],
            h_slope: row[2 * k + 6],
            h_intercept: row[2 * k + 7],
        })
    }
}

/// Precomputed per-task quantities the targets reuse every evaluation.
pub(crate) struct TaskBlock {
    pub dists: DMatrix<f64>,
    pub y: DVector<f64>,
    pub n: usize,
}

impl TaskBlock {
    pub fn from_dataset(data: &TaskDataset) -> Result<Self, ModelError> {
        let inputs = data.train_inputs();
        let n = inputs.len();
        if n == 0 {
            return Err(ModelError::Dimension {
                context: format!("task {} has no training points", data.pair_label()),
            });
        }
        let mut dists = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let d = inputs[i].dist(&inputs[j]);
                dists[(i, j)] = d;
                dists[(j, i)] = d;
            }
        }
        Ok(Self {
            dists,
            y: DVector::from_column_slice(&data.train_outputs()),
            n,
        })
    }

    /// Lower Cholesky factor of this task's noise-GP covariance.
    fn noise_chol(&self, noise_alpha: f64, noise_lengthscale: f64) -> Result<DMatrix<f64>, ModelError> {
        let kernel = Matern32Kernel::new(noise_alpha, noise_lengthscale)?;
        let k_r = kernel_from_dists(&self.dists, &kernel);
        Ok(chol_jittered(&k_r, false)?.0.l())
    }
}

/// d k / d ln(lengthscale), elementwise: k(d) * s^2 / (1 + s) with s = sqrt(3) d / l.
fn matern_log_length_deriv(
    dists: &DMatrix<f64>,
    k: &DMatrix<f64>,
    lengthscale: f64,
) -> DMatrix<f64> {
    let mut out = k.clone();
    for (o, d) in out.iter_mut().zip(dists.iter()) {
        let s = SQRT_3 * d / lengthscale;
        *o *= s * s / (1.0 + s);
    }
    out
}

/// w' Phi(L^-1 kdot L^-T) z, the directional derivative of the likelihood through
/// the factor: dL = L Phi(L^-1 dK L^-T), Phi keeping the lower triangle with the
/// diagonal halved.
fn noise_hyper_grad(
    l_r: &DMatrix<f64>,
    kdot: &DMatrix<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64, ModelError> {
    let t = l_r
        .solve_lower_triangular(kdot)
        .ok_or_else(|| ModelError::NonFinite {
            term: "triangular solve in noise gradient".into(),
        })?;
    let s = l_r
        .solve_lower_triangular(&t.transpose())
        .ok_or_else(|| ModelError::NonFinite {
            term: "triangular solve in noise gradient".into(),
        })?
        .transpose();
    let n = w.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += 0.5 * w[i] * s[(i, i)] * z[i];
        for j in 0..i {
            acc += w[i] * s[(i, j)] * z[j];
        }
    }
    Ok(acc)
}

struct TaskEval {
    lp_lik: f64,
    lp_z: f64,
    d_log_lengthscale: f64,
    d_log_alpha: f64,
    d_noise_mean: f64,
    d_log_noise_alpha: f64,
    d_log_noise_lengthscale: f64,
    d_z: DVector<f64>,
}

/// One task's marginal likelihood, latent density, and all gradient pieces at
/// fixed constrained hyperparameters. Derivatives of positive hyperparameters
/// are with respect to their logs.
fn eval_task(
    block: &TaskBlock,
    alpha: f64,
    lengthscale: f64,
    noise_mean: f64,
    noise_alpha: f64,
    noise_lengthscale: f64,
    z: &[f64],
) -> Result<TaskEval, ModelError> {
    let n = block.n;
    if z.len() != n {
        return Err(ModelError::Dimension {
            context: format!("task with {n} points given {} latent values", z.len()),
        });
    }
    let l_r = block.noise_chol(noise_alpha, noise_lengthscale)?;
    let zv = DVector::from_column_slice(z);
    let mut r = &l_r * &zv;
    r.add_scalar_mut(noise_mean);

    let kernel = Matern32Kernel::new(alpha, lengthscale)?;
    let k_f = kernel_from_dists(&block.dists, &kernel);
    let exp2r: Vec<f64> = r.iter().map(|v| (2.0 * v).exp()).collect();
    let mut sigma = k_f.clone();
    for i in 0..n {
        sigma[(i, i)] += exp2r[i];
    }
    let (chol_s, jitter) = chol_jittered(&sigma, false)?;
    let log_det = 2.0 * chol_s.l_dirty().diagonal().map(f64::ln).sum();
    let alpha_v = chol_s.solve(&block.y);
    let quad = block.y.dot(&alpha_v);
    let nf = n as f64;
    let lp_lik = -0.5 * nf * LOG_2PI - 0.5 * log_det - 0.5 * quad;
    let lp_z = -0.5 * nf * LOG_2PI - 0.5 * zv.norm_squared();

    let sigma_inv = chol_s.inverse();
    // The factored matrix is sigma + jitter I with jitter scaled off sigma's
    // mean diagonal, so the jitter moves with r and alpha; fold d(jitter) into
    // the diagonal derivatives to keep the gradient consistent with the value.
    let mean_diag = sigma.diagonal().sum() / nf;
    // On the absolute-floor branch the jitter does not move with the state.
    let c_eff = if JITTER_REL_START * mean_diag >= JITTER_ABS_FLOOR {
        jitter / mean_diag
    } else {
        0.0
    };
    let s_jitter = 0.5 * (alpha_v.norm_squared() - sigma_inv.trace());
    let jitter_pull = 2.0 * c_eff * s_jitter / nf;
    let mut g_r = DVector::zeros(n);
    for i in 0..n {
        g_r[i] = (alpha_v[i] * alpha_v[i] - sigma_inv[(i, i)] + jitter_pull) * exp2r[i];
    }
    let d_z = l_r.transpose() * &g_r - &zv;
    let d_noise_mean = g_r.sum();

    let kf_av = &k_f * &alpha_v;
    let d_log_alpha = alpha_v.dot(&kf_av) - sigma_inv.component_mul(&k_f).sum()
        + jitter_pull * nf * alpha * alpha;
    let kdot_f = matern_log_length_deriv(&block.dists, &k_f, lengthscale);
    let kdot_av = &kdot_f * &alpha_v;
    let d_log_lengthscale = 0.5 * (alpha_v.dot(&kdot_av) - sigma_inv.component_mul(&kdot_f).sum());

    let w = l_r.transpose() * &g_r;
    let noise_kernel = Matern32Kernel::new(noise_alpha, noise_lengthscale)?;
    let k_r = kernel_from_dists(&block.dists, &noise_kernel);
    let kdot_ra = &k_r * 2.0;
    let d_log_noise_alpha = noise_hyper_grad(&l_r, &kdot_ra, &w, &zv)?;
    let kdot_rl = matern_log_length_deriv(&block.dists, &k_r, noise_lengthscale);
    let d_log_noise_lengthscale = noise_hyper_grad(&l_r, &kdot_rl, &w, &zv)?;

    Ok(TaskEval {
        lp_lik,
        lp_z,
        d_log_lengthscale,
        d_log_alpha,
        d_noise_mean,
        d_log_noise_alpha,
        d_log_noise_lengthscale,
        d_z,
    })
}

/// Shared-header prior (value includes the log transforms' Jacobians; gradients
/// are with respect to the unconstrained coordinates, layout order).
fn stl_prior_u(h: &HyperParams, pc: &PriorConstants) -> (f64, [f64; 5]) {
    let lp = log_prior_stl(h, pc);
    let g = [
        pc.lengthscale_shape - pc.lengthscale_rate * h.lengthscale,
        1.0 - h.alpha * h.alpha / (pc.alpha_scale * pc.alpha_scale),
        -(h.noise_mean - pc.noise_mean_loc) / (pc.noise_mean_scale * pc.noise_mean_scale),
        1.0 - h.noise_alpha * h.noise_alpha / (pc.noise_alpha_scale * pc.noise_alpha_scale),
        pc.noise_lengthscale_shape - pc.noise_lengthscale_rate * h.noise_lengthscale,
    ];
    (lp, g)
}

fn any_nonfinite(u: &[f64]) -> bool {
    u.iter().any(|v| !v.is_finite())
}

fn header_out_of_range(header: &[f64]) -> bool {
    header.iter().any(|v| v.abs() > HEADER_GUARD)
}

fn reject(dim: usize) -> (f64, DVector<f64>) {
    (f64::NEG_INFINITY, DVector::zeros(dim))
}

fn finish(
    value: f64,
    grad: DVector<f64>,
    layout: &ParamLayout,
) -> Result<(f64, DVector<f64>), ModelError> {
    if value.is_nan() {
        return Err(ModelError::NonFinite {
            term: "log density".into(),
        });
    }
    if value == f64::NEG_INFINITY {
        let dim = grad.len();
        return Ok((value, DVector::zeros(dim)));
    }
    for (i, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(ModelError::NonFinite {
                term: format!("gradient of {}", layout.names()[i]),
            });
        }
    }
    Ok((value, grad))
}

/// Single-task posterior over [ln lengthscale, ln alpha, noise_mean,
/// ln noise_alpha, ln noise_lengthscale, z...].
pub struct StlTarget {
    block: TaskBlock,
    pc: PriorConstants,
    layout: ParamLayout,
}

impl StlTarget {
    pub fn new(data: &TaskDataset, pc: &PriorConstants) -> Result<Self, ModelError> {
        let block = TaskBlock::from_dataset(data)?;
        let layout = ParamLayout::stl(block.n);
        Ok(Self {
            block,
            pc: pc.clone(),
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn value_and_grad(&self, u: &[f64]) -> Result<(f64, DVector<f64>), ModelError> {
        let dim = self.layout.dim();
        if u.len() != dim {
            return Err(ModelError::Dimension {
                context: format!("state of length {} for a {dim}-dimensional target", u.len()),
            });
        }
        if any_nonfinite(u) || header_out_of_range(&u[..5]) {
            return Ok(reject(dim));
        }
        let h = constrain_hyperparams(&[u[0], u[1], u[2], u[3], u[4]]);
        let (lp_prior, gp) = stl_prior_u(&h, &self.pc);
        let ev = eval_task(
            &self.block,
            h.alpha,
            h.lengthscale,
            h.noise_mean,
            h.noise_alpha,
            h.noise_lengthscale,
            &u[5..],
        )?;
        let value = lp_prior + ev.lp_z + ev.lp_lik;
        let mut grad = DVector::zeros(dim);
        grad[0] = gp[0] + ev.d_log_lengthscale;
        grad[1] = gp[1] + ev.d_log_alpha;
        grad[2] = gp[2] + ev.d_noise_mean;
        grad[3] = gp[3] + ev.d_log_noise_alpha;
        grad[4] = gp[4] + ev.d_log_noise_lengthscale;
        grad.rows_mut(5, self.block.n).copy_from(&ev.d_z);
        finish(value, grad, &self.layout)
    }

    pub fn constrain_row(&self, u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        out[0] = u[0].exp();
        out[1] = u[1].exp();
        out[3] = u[3].exp();
        out[4] = u[4].exp();
        let l_r = self
            .block
            .noise_chol(out[3], out[4])
            .expect("noise covariance factored when the state was scored");
        let zv = DVector::from_column_slice(&u[5..]);
        let mut r = &l_r * &zv;
        r.add_scalar_mut(out[2]);
        out[5..].copy_from_slice(r.as_slice());
        out
    }
}

/// Shared-hyperparameter posterior: one header, per-task latent noise blocks.
pub struct MtlATarget {
    blocks: Vec<TaskBlock>,
    pc: PriorConstants,
    layout: ParamLayout,
}

impl MtlATarget {
    pub fn new(datasets: &[TaskDataset], pc: &PriorConstants) -> Result<Self, ModelError> {
        if datasets.is_empty() {
            return Err(ModelError::Dimension {
                context: "no tasks given".into(),
            });
        }
        let blocks: Vec<TaskBlock> = datasets
            .iter()
            .map(TaskBlock::from_dataset)
            .collect::<Result<_, _>>()?;
        let sizes: Vec<usize> = blocks.iter().map(|b| b.n).collect();
        let layout = ParamLayout::mtl_a(&sizes);
        Ok(Self {
            blocks,
            pc: pc.clone(),
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn value_and_grad(&self, u: &[f64]) -> Result<(f64, DVector<f64>), ModelError> {
        let dim = self.layout.dim();
        if u.len() != dim {
            return Err(ModelError::Dimension {
                context: format!("state of length {} for a {dim}-dimensional target", u.len()),
            });
        }
        if any_nonfinite(u) || header_out_of_range(&u[..5]) {
            return Ok(reject(dim));
        }
        let h = constrain_hyperparams(&[u[0], u[1], u[2], u[3], u[4]]);
        let (lp_prior, gp) = stl_prior_u(&h, &self.pc);
        let mut value = lp_prior;
        let mut grad = DVector::zeros(dim);
        for i in 0..5 {
            grad[i] = gp[i];
        }
        for (k, block) in self.blocks.iter().enumerate() {
            let off = self.layout.z_offset(k);
            let ev = eval_task(
                block,
                h.alpha,
                h.lengthscale,
                h.noise_mean,
                h.noise_alpha,
                h.noise_lengthscale,
                &u[off..off + block.n],
            )?;
            value += ev.lp_z + ev.lp_lik;
            grad[0] += ev.d_log_lengthscale;
            grad[1] += ev.d_log_alpha;
            grad[2] += ev.d_noise_mean;
            grad[3] += ev.d_log_noise_alpha;
            grad[4] += ev.d_log_noise_lengthscale;
            grad.rows_mut(off, block.n).copy_from(&ev.d_z);
        }
        finish(value, grad, &self.layout)
    }

    pub fn constrain_row(&self, u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        out[0] = u[0].exp();
        out[1] = u[1].exp();
        out[3] = u[3].exp();
        out[4] = u[4].exp();
        for (k, block) in self.blocks.iter().enumerate() {
            let off = self.layout.z_offset(k);
            let l_r = block
                .noise_chol(out[3], out[4])
                .expect("noise covariance factored when the state was scored");
            let zv = DVector::from_column_slice(&u[off..off + block.n]);
            let mut r = &l_r * &zv;
            r.add_scalar_mut(out[2]);
            out[off..off + block.n].copy_from_slice(r.as_slice());
        }
        out
    }
}

struct IntertaskEval {
    lp: f64,
    d_values: DVector<f64>,
    d_log_amp: f64,
    d_log_len: f64,
    d_slope: f64,
    d_intercept: f64,
}

/// Density and gradients of one latent vector (g or h) under its GP over task
/// separations with a linear mean. Slope and intercept derivatives are with
/// respect to the constrained values.
fn intertask_eval(
    sep_dists: &DMatrix<f64>,
    separations: &[f64],
    values: &[f64],
    amplitude: f64,
    lengthscale: f64,
    slope: f64,
    intercept: f64,
) -> Result<IntertaskEval, ModelError> {
    let kq = values.len();
    let kernel = Matern32Kernel::new(amplitude, lengthscale)?;
    let kmat = kernel_from_dists(sep_dists, &kernel);
    let (chol, _) = chol_jittered(&kmat, false)?;
    let resid = DVector::from_iterator(
        kq,
        separations
            .iter()
            .zip(values)
            .map(|(s, v)| v - (slope * s + intercept)),
    );
    let a = chol.solve(&resid);
    let log_det = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
    let lp = -0.5 * (kq as f64) * LOG_2PI - 0.5 * log_det - 0.5 * resid.dot(&a);
    let kinv = chol.inverse();
    let k_av = &kmat * &a;
    let d_log_amp = a.dot(&k_av) - kinv.component_mul(&kmat).sum();
    let kdot = matern_log_length_deriv(sep_dists, &kmat, lengthscale);
    let kdot_av = &kdot * &a;
    let d_log_len = 0.5 * (a.dot(&kdot_av) - kinv.component_mul(&kdot).sum());
    let sep_v = DVector::from_column_slice(separations);
    Ok(IntertaskEval {
        lp,
        d_slope: a.dot(&sep_v),
        d_intercept: a.sum(),
        d_values: -a,
        d_log_amp,
        d_log_len,
    })
}

/// Intertask posterior: per-task raw kernel parameters g, h tied by GPs over
/// task separation, one shared noise header, per-task latent noise blocks.
pub struct MtlBTarget {
    blocks: Vec<TaskBlock>,
    separations: Vec<f64>,
    sep_dists: DMatrix<f64>,
    pc: PriorConstants,
    layout: ParamLayout,
}

impl MtlBTarget {
    pub fn new(datasets: &[TaskDataset], pc: &PriorConstants) -> Result<Self, ModelError> {
        if datasets.is_empty() {
            return Err(ModelError::Dimension {
                context: "no tasks given".into(),
            });
        }
        let blocks: Vec<TaskBlock> = datasets
            .iter()
            .map(TaskBlock::from_dataset)
            .collect::<Result<_, _>>()?;
        let separations: Vec<f64> = datasets.iter().map(|d| d.separation).collect();
        let kq = separations.len();
        let mut sep_dists = DMatrix::zeros(kq, kq);
        for i in 0..kq {
            for j in 0..kq {
                sep_dists[(i, j)] = (separations[i] - separations[j]).abs();
            }
        }
        let sizes: Vec<usize> = blocks.iter().map(|b| b.n).collect();
        let layout = ParamLayout::mtl_b(&sizes);
        Ok(Self {
            blocks,
            separations,
            sep_dists,
            pc: pc.clone(),
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn separations(&self) -> &[f64] {
        &self.separations
    }

    fn transforms(&self) -> (Transform, Transform) {
        (
            Transform::ScaledLogit {
                lo: self.pc.slope_lo,
                hi: self.pc.slope_hi,
            },
            Transform::ScaledLogit {
                lo: self.pc.intercept_lo,
                hi: self.pc.intercept_hi,
            },
        )
    }

    pub fn value_and_grad(&self, u: &[f64]) -> Result<(f64, DVector<f64>), ModelError> {
        let dim = self.layout.dim();
        let kq = self.blocks.len();
        if u.len() != dim {
            return Err(ModelError::Dimension {
                context: format!("state of length {} for a {dim}-dimensional target", u.len()),
            });
        }
        let head = 2 * kq;
        if any_nonfinite(u) || header_out_of_range(&u[..head + 11]) {
            return Ok(reject(dim));
        }
        let g_vals = &u[..kq];
        let h_vals = &u[kq..head];
        let (slope_t, icept_t) = self.transforms();
        let alpha_g = u[head].exp();
        let len_g = u[head + 1].exp();
        let slope_g = slope_t.constrain(u[head + 2]);
        let icept_g = icept_t.constrain(u[head + 3]);
        let alpha_h = u[head + 4].exp();
        let len_h = u[head + 5].exp();
        let slope_h = slope_t.constrain(u[head + 6]);
        let icept_h = icept_t.constrain(u[head + 7]);
        let noise_mean = u[head + 8];
        let noise_alpha = u[head + 9].exp();
        let noise_len = u[head + 10].exp();
        let pc = &self.pc;

        let mut value = 0.0;
        let mut grad = DVector::zeros(dim);

        for (off, x, shape, rate) in [
            (head, alpha_g, pc.intertask_amplitude_shape, pc.intertask_amplitude_rate),
            (head + 1, len_g, pc.intertask_lengthscale_shape, pc.intertask_lengthscale_rate),
            (head + 4, alpha_h, pc.intertask_amplitude_shape, pc.intertask_amplitude_rate),
            (head + 5, len_h, pc.intertask_lengthscale_shape, pc.intertask_lengthscale_rate),
        ] {
            value += gamma_lpdf(x, shape, rate) + u[off];
            grad[off] += shape - rate * x;
        }
        for (off, x, tr, lo, hi) in [
            (head + 2, slope_g, &slope_t, pc.slope_lo, pc.slope_hi),
            (head + 3, icept_g, &icept_t, pc.intercept_lo, pc.intercept_hi),
            (head + 6, slope_h, &slope_t, pc.slope_lo, pc.slope_hi),
            (head + 7, icept_h, &icept_t, pc.intercept_lo, pc.intercept_hi),
        ] {
            value += uniform_lpdf(x, lo, hi) + tr.log_jacobian(u[off]);
            grad[off] += tr.grad_log_jacobian(u[off]);
        }
        value += normal_lpdf(noise_mean, pc.noise_mean_loc, pc.noise_mean_scale);
        grad[head + 8] +=
            -(noise_mean - pc.noise_mean_loc) / (pc.noise_mean_scale * pc.noise_mean_scale);
        value += half_normal_lpdf(noise_alpha, pc.noise_alpha_scale) + u[head + 9];
        grad[head + 9] +=
            1.0 - noise_alpha * noise_alpha / (pc.noise_alpha_scale * pc.noise_alpha_scale);
        value += gamma_lpdf(
            noise_len,
            pc.noise_lengthscale_shape,
            pc.noise_lengthscale_rate,
        ) + u[head + 10];
        grad[head + 10] += pc.noise_lengthscale_shape - pc.noise_lengthscale_rate * noise_len;

        for (vals, hyper_off, block_off, amp, len, slope, icept) in [
            (g_vals, head, 0, alpha_g, len_g, slope_g, icept_g),
            (h_vals, head + 4, kq, alpha_h, len_h, slope_h, icept_h),
        ] {
            let ev = intertask_eval(
                &self.sep_dists,
                &self.separations,
                vals,
                amp,
                len,
                slope,
                icept,
            )?;
            value += ev.lp;
            for k in 0..kq {
                grad[block_off + k] += ev.d_values[k];
            }
            grad[hyper_off] += ev.d_log_amp;
            grad[hyper_off + 1] += ev.d_log_len;
            let v_s = u[hyper_off + 2];
            let span_s = pc.slope_hi - pc.slope_lo;
            grad[hyper_off + 2] += ev.d_slope * span_s * sigmoid(v_s) * sigmoid(-v_s);
            let v_c = u[hyper_off + 3];
            let span_c = pc.intercept_hi - pc.intercept_lo;
            grad[hyper_off + 3] += ev.d_intercept * span_c * sigmoid(v_c) * sigmoid(-v_c);
        }

        for (k, block) in self.blocks.iter().enumerate() {
            let alpha_k = softplus(g_vals[k]);
            let len_k = softplus(h_vals[k]);
            let off = self.layout.z_offset(k);
            let ev = eval_task(
                block,
                alpha_k,
                len_k,
                noise_mean,
                noise_alpha,
                noise_len,
                &u[off..off + block.n],
            )?;
            value += ev.lp_z + ev.lp_lik;
            grad[k] += ev.d_log_alpha / alpha_k * sigmoid(g_vals[k]);
            grad[kq + k] += ev.d_log_lengthscale / len_k * sigmoid(h_vals[k]);
            grad[head + 8] += ev.d_noise_mean;
            grad[head + 9] += ev.d_log_noise_alpha;
            grad[head + 10] += ev.d_log_noise_lengthscale;
            grad.rows_mut(off, block.n).copy_from(&ev.d_z);
        }
        finish(value, grad, &self.layout)
    }

    pub fn constrain_row(&self, u: &[f64]) -> Vec<f64> {
        let kq = self.blocks.len();
        let head = 2 * kq;
        let (slope_t, icept_t) = self.transforms();
        let mut out = u.to_vec();
        out[head] = u[head].exp();
        out[head + 1] = u[head + 1].exp();
        out[head + 2] = slope_t.constrain(u[head + 2]);
        out[head + 3] = icept_t.constrain(u[head + 3]);
        out[head + 4] = u[head + 4].exp();
        out[head + 5] = u[head + 5].exp();
        out[head + 6] = slope_t.constrain(u[head + 6]);
        out[head + 7] = icept_t.constrain(u[head + 7]);
        out[head + 9] = u[head + 9].exp();
        out[head + 10] = u[head + 10].exp();
        for (k, block) in self.blocks.iter().enumerate() {
            let off = self.layout.z_offset(k);
            let l_r = block
                .noise_chol(out[head + 9], out[head + 10])
                .expect("noise covariance factored when the state was scored");
            let zv = DVector::from_column_slice(&u[off..off + block.n]);
            let mut r = &l_r * &zv;
            r.add_scalar_mut(out[head + 8]);
            out[off..off + block.n].copy_from_slice(r.as_slice());
        }
        out
    }
}

macro_rules! impl_target {
    ($ty:ty) => {
        impl crate::inference::Target for $ty {
            fn dim(&self) -> usize {
                self.layout.dim()
            }

            fn log_density_and_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
                match self.value_and_grad(u) {
                    Ok((v, g)) => {
                        grad.copy_from_slice(g.as_slice());
                        v
                    }
                    Err(_) => {
                        grad.fill(0.0);
                        f64::NEG_INFINITY
                    }
                }
            }

            fn param_names(&self) -> Vec<String> {
                self.layout.names().to_vec()
            }

            fn constrain(&self, u: &[f64]) -> Vec<f64> {
                self.constrain_row(u)
            }
        }
    };
}

impl_target!(StlTarget);
impl_target!(MtlATarget);
impl_target!(MtlBTarget);

/// Sum over tasks of ln diag L_r at given noise hyperparameters: the log-density
/// offset between the non-centered target and the centered joint.
#[cfg(test)]
pub(crate) fn log_det_half_sum(
    blocks: &[&TaskBlock],
    noise_alpha: f64,
    noise_lengthscale: f64,
) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for b in blocks {
        let l = b.noise_chol(noise_alpha, noise_lengthscale)?;
        acc += l.diagonal().map(f64::ln).sum();
    }
    Ok(acc)
}
