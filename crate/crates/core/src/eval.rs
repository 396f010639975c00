//! Posterior-predictive scoring, hyperparameter prediction at unseen task
//! separations, and the training-budget transfer experiment.
//!
//! The score of a task is lpY = sum over test points of
//! ln( (1/S) sum over posterior samples of N(y; mean_s, var_s) ), computed with
//! log-sum-exp. Per-sample predictive moments come from exact GP conditioning;
//! the observation noise at a test input is exp of the latent log-noise GP's
//! predictive mean under that sample.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::datagen::{fmt_f64, DataError, TaskDataset};
use crate::gp::{gp_condition_with_mean, gp_predict, GpError, Matern32Kernel, LOG_2PI};
use crate::inference::{
    initialize, sample, split_seed, PosteriorDraws, SamplerConfig, SamplerError,
};
use crate::model::{
    softplus, HyperParams, ModelError, ParamLayout, PriorConstants, Regime, StlTarget,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn domain(msg: impl Into<String>) -> EvalError {
    EvalError::Domain(msg.into())
}

/// Evenly spaced draw indices: everything when the posterior is small enough,
/// otherwise `max_samples` strides through it.
fn thin_indices(total: usize, max_samples: usize) -> Vec<usize> {
    if total == 0 || max_samples == 0 {
        return Vec::new();
    }
    if total <= max_samples {
        return (0..total).collect();
    }
    (0..max_samples).map(|i| i * total / max_samples).collect()
}

/// lpY from per-sample predictive moments: for each point, the log of the
/// sample-averaged Gaussian density, summed over points.
pub fn predictive_lpy_from_moments(
    means: &[Vec<f64>],
    vars: &[Vec<f64>],
    y: &[f64],
) -> Result<f64, EvalError> {
    let s = means.len();
    if s == 0 {
        return Err(domain("no posterior samples"));
    }
    if vars.len() != s {
        return Err(domain(format!(
            "{s} mean vectors with {} variance vectors",
            vars.len()
        )));
    }
    let n = y.len();
    for (si, (m, v)) in means.iter().zip(vars).enumerate() {
        if m.len() != n || v.len() != n {
            return Err(domain(format!(
                "sample {si}: {} means and {} variances for {n} observations",
                m.len(),
                v.len()
            )));
        }
    }
    let ln_s = (s as f64).ln();
    let mut total = 0.0;
    let mut terms = vec![0.0; s];
    for i in 0..n {
        let mut max_term = f64::NEG_INFINITY;
        for si in 0..s {
            let v = vars[si][i];
            if !(v > 0.0) || !v.is_finite() {
                return Err(domain(format!(
                    "predictive variance {v} at point {i} of sample {si}"
                )));
            }
            let d = y[i] - means[si][i];
            let t = -0.5 * LOG_2PI - 0.5 * v.ln() - 0.5 * d * d / v;
            terms[si] = t;
            if t > max_term {
                max_term = t;
            }
        }
        let lse = if max_term == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            max_term + terms.iter().map(|t| (t - max_term).exp()).sum::<f64>().ln()
        };
        total += lse - ln_s;
    }
    Ok(total)
}

/// One posterior sample's predictive mean and marginal variance (noise
/// included) at the test inputs.
fn sample_predictive(
    train_inputs: &[[f64; 2]],
    train_outputs: &[f64],
    test_inputs: &[[f64; 2]],
    h: &HyperParams,
    r_train: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let noise_kernel = Matern32Kernel::new(h.noise_alpha, h.noise_lengthscale)?;
    let mean_train = DVector::from_element(train_inputs.len(), h.noise_mean);
    let mean_test = DVector::from_element(test_inputs.len(), h.noise_mean);
    let (r_hat, _) = gp_condition_with_mean(
        train_inputs,
        r_train,
        test_inputs,
        &noise_kernel,
        &mean_train,
        &mean_test,
    )?;
    let noise_train: Vec<f64> = r_train.iter().map(|r| r.exp()).collect();
    let noise_test: Vec<f64> = r_hat.iter().map(|r| r.exp()).collect();
    let kernel = Matern32Kernel::new(h.alpha, h.lengthscale)?;
    let (mean, cov) = gp_predict(
        train_inputs,
        train_outputs,
        test_inputs,
        &kernel,
        &noise_train,
        &noise_test,
    )?;
    let means = mean.iter().copied().collect();
    let vars = (0..test_inputs.len()).map(|i| cov[(i, i)]).collect();
    Ok((means, vars))
}

/// Predictive score of one task's test split under a posterior, with the
/// sample-averaged per-point predictive moments.
#[derive(Clone, Debug)]
pub struct TaskPredictive {
    pub lpy: f64,
    pub point_mean: Vec<f64>,
    pub point_var: Vec<f64>,
}

/// Score `task`'s test points under the draws, reading task `task_index`'s
/// parameters from each row. At most `max_samples` evenly spaced samples are
/// used.
pub fn predictive_log_likelihood(
    task: &TaskDataset,
    draws: &PosteriorDraws,
    layout: &ParamLayout,
    task_index: usize,
    max_samples: usize,
) -> Result<TaskPredictive, EvalError> {
    if layout.dim() != draws.dim() {
        return Err(domain(format!(
            "layout dimension {} does not match draw dimension {}",
            layout.dim(),
            draws.dim()
        )));
    }
    if layout.names() != draws.names() {
        return Err(domain(
            "draw parameter names do not match the layout".to_string(),
        ));
    }
    if task_index >= layout.task_count() {
        return Err(domain(format!(
            "task index {task_index} for a {}-task layout",
            layout.task_count()
        )));
    }
    let train_inputs = task.train_inputs();
    let train_outputs = task.train_outputs();
    let test_inputs = task.test_inputs();
    let test_outputs = task.test_outputs();
    if test_inputs.is_empty() {
        return Err(domain(format!("task {} has no test points", task.pair_label())));
    }
    if train_inputs.len() != layout.task_sizes()[task_index] {
        return Err(domain(format!(
            "task {} has {} training points but the layout records {}",
            task.pair_label(),
            train_inputs.len(),
            layout.task_sizes()[task_index]
        )));
    }
    let idxs = thin_indices(draws.total_draws(), max_samples);
    if idxs.is_empty() {
        return Err(domain("no posterior samples"));
    }
    let mut means = Vec::with_capacity(idxs.len());
    let mut vars = Vec::with_capacity(idxs.len());
    for &i in &idxs {
        let row = draws.flat_row(i);
        let h = layout.hyperparams(row, task_index);
        let noise = layout.noise_field(row, task_index);
        let (m, v) = sample_predictive(
            &train_inputs,
            &train_outputs,
            &test_inputs,
            &h,
            &noise.r_values,
        )?;
        means.push(m);
        vars.push(v);
    }
    let lpy = predictive_lpy_from_moments(&means, &vars, &test_outputs)?;
    let s = means.len() as f64;
    let nt = test_outputs.len();
    let mut point_mean = vec![0.0; nt];
    for m in &means {
        for i in 0..nt {
            point_mean[i] += m[i] / s;
        }
    }
    let mut point_var = vec![0.0; nt];
    for (m, v) in means.iter().zip(&vars) {
        for i in 0..nt {
            let dm = m[i] - point_mean[i];
            point_var[i] += (v[i] + dm * dm) / s;
        }
    }
    Ok(TaskPredictive {
        lpy,
        point_mean,
        point_var,
    })
}

/// Predictive mean of one latent intertask value at `target_sep`, conditioning
/// its GP (linear mean) on the latent values at the training separations.
fn predict_latent(
    train_seps: &[f64],
    values: &[f64],
    amplitude: f64,
    lengthscale: f64,
    slope: f64,
    intercept: f64,
    target_sep: f64,
) -> Result<f64, EvalError> {
    let kernel = Matern32Kernel::new(amplitude, lengthscale)?;
    let mean_train = DVector::from_iterator(
        train_seps.len(),
        train_seps.iter().map(|s| slope * s + intercept),
    );
    let mean_test = DVector::from_element(1, slope * target_sep + intercept);
    let (m, _) = gp_condition_with_mean(
        train_seps,
        values,
        &[target_sep],
        &kernel,
        &mean_train,
        &mean_test,
    )?;
    Ok(m[0])
}

/// Posterior-averaged kernel parameters at an unseen separation: per sample,
/// condition the g and h GPs on their latent values, read the predictive mean
/// at `target_sep`, map through softplus; then average. Strictly positive by
/// construction.
pub fn predict_hyperparams(
    draws: &PosteriorDraws,
    layout: &ParamLayout,
    train_seps: &[f64],
    target_sep: f64,
    max_samples: usize,
) -> Result<(f64, f64), EvalError> {
    if layout.regime() != Regime::MtlB {
        return Err(domain(
            "hyperparameter prediction needs an intertask posterior".to_string(),
        ));
    }
    if layout.dim() != draws.dim() || layout.names() != draws.names() {
        return Err(domain(
            "draw parameter names do not match the layout".to_string(),
        ));
    }
    if !target_sep.is_finite() || target_sep < 0.0 {
        return Err(domain(format!("target separation {target_sep}")));
    }
    if train_seps.len() != layout.task_count() {
        return Err(domain(format!(
            "{} training separations for a {}-task layout",
            train_seps.len(),
            layout.task_count()
        )));
    }
    let idxs = thin_indices(draws.total_draws(), max_samples);
    if idxs.is_empty() {
        return Err(domain("empty posterior"));
    }
    let mut acc_alpha = 0.0;
    let mut acc_len = 0.0;
    for &i in &idxs {
        let row = draws.flat_row(i);
        let inter = layout
            .intertask(row)
            .expect("intertask block present in an mtl_b layout");
        let g_hat = predict_latent(
            train_seps,
            &inter.g_values,
            inter.g_amplitude,
            inter.g_lengthscale,
            inter.g_slope,
            inter.g_intercept,
            target_sep,
        )?;
        let h_hat = predict_latent(
            train_seps,
            &inter.h_values,
            inter.h_amplitude,
            inter.h_lengthscale,
            inter.h_slope,
            inter.h_intercept,
            target_sep,
        )?;
        acc_alpha += softplus(g_hat);
        acc_len += softplus(h_hat);
    }
    let s = idxs.len() as f64;
    Ok((acc_alpha / s, acc_len / s))
}

/// Per-task and combined predictive scores of one method.
#[derive(Clone, Debug)]
pub struct PredictiveSummary {
    pub per_task_lpy: Vec<f64>,
    pub total_lpy: f64,
    pub per_point_mean: Vec<Vec<f64>>,
    pub per_point_var: Vec<Vec<f64>>,
}

impl PredictiveSummary {
    fn from_tasks(tasks: Vec<TaskPredictive>) -> Self {
        let per_task_lpy: Vec<f64> = tasks.iter().map(|t| t.lpy).collect();
        let total_lpy = per_task_lpy.iter().sum();
        Self {
            per_task_lpy,
            total_lpy,
            per_point_mean: tasks.iter().map(|t| t.point_mean.clone()).collect(),
            per_point_var: tasks.into_iter().map(|t| t.point_var).collect(),
        }
    }
}

/// A fitted posterior bound to the population: either one single-task fit per
/// task (aligned with the population order) or one joint fit covering them all.
pub enum MethodPosterior<'a> {
    PerTask(Vec<(&'a PosteriorDraws, &'a ParamLayout)>),
    Joint(&'a PosteriorDraws, &'a ParamLayout),
}

pub struct CompareEntry<'a> {
    pub name: String,
    pub posterior: MethodPosterior<'a>,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub methods: Vec<String>,
    pub task_labels: Vec<String>,
    /// [method][task]
    pub per_task: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub summaries: Vec<PredictiveSummary>,
}

impl CompareReport {
    /// Wide table: one row per task plus a TOTAL row, one column per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for m in &self.methods {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for (t, label) in self.task_labels.iter().enumerate() {
            out.push_str(label);
            for mt in &self.per_task {
                out.push(',');
                out.push_str(&fmt_f64(mt[t]));
            }
            out.push('\n');
        }
        out.push_str("TOTAL");
        for total in &self.totals {
            out.push(',');
            out.push_str(&fmt_f64(*total));
        }
        out.push('\n');
        out
    }
}

/// Score every task's test split under each method's posterior. All methods see
/// the same datasets (and therefore the same splits).
pub fn compare_methods(
    population: &[TaskDataset],
    entries: &[CompareEntry],
    max_samples: usize,
) -> Result<CompareReport, EvalError> {
    if population.is_empty() {
        return Err(domain("empty population"));
    }
    if entries.is_empty() {
        return Err(domain("no methods to compare"));
    }
    let mut methods = Vec::new();
    let mut per_task = Vec::new();
    let mut totals = Vec::new();
    let mut summaries = Vec::new();
    for entry in entries {
        let tasks: Vec<TaskPredictive> = match &entry.posterior {
            MethodPosterior::PerTask(fits) => {
                if fits.len() != population.len() {
                    return Err(domain(format!(
                        "method {}: {} per-task fits for {} tasks",
                        entry.name,
                        fits.len(),
                        population.len()
                    )));
                }
                population
                    .iter()
                    .zip(fits)
                    .map(|(task, (draws, layout))| {
                        predictive_log_likelihood(task, draws, layout, 0, max_samples)
                    })
                    .collect::<Result<_, _>>()?
            }
            MethodPosterior::Joint(draws, layout) => {
                if layout.task_count() != population.len() {
                    return Err(domain(format!(
                        "method {}: joint fit covers {} tasks but the population has {}",
                        entry.name,
                        layout.task_count(),
                        population.len()
                    )));
                }
                population
                    .iter()
                    .enumerate()
                    .map(|(k, task)| {
                        predictive_log_likelihood(task, draws, layout, k, max_samples)
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        let summary = PredictiveSummary::from_tasks(tasks);
        methods.push(entry.name.clone());
        per_task.push(summary.per_task_lpy.clone());
        totals.push(summary.total_lpy);
        summaries.push(summary);
    }
    Ok(CompareReport {
        methods,
        task_labels: population.iter().map(|t| t.pair_label()).collect(),
        per_task,
        totals,
        summaries,
    })
}

/// Point estimate a transfer method carries to a hold-out task.
#[derive(Clone, Debug, Serialize)]
pub struct HyperEstimate {
    pub task: String,
    pub alpha: f64,
    pub lengthscale: f64,
    pub noise_sd: f64,
}

#[derive(Clone, Debug)]
pub struct TransferCurve {
    pub method_tag: Regime,
    pub budgets: Vec<usize>,
    pub mean_lpy: Vec<f64>,
    pub repeats: usize,
    /// [budget][repeat], each value summed over the hold-out tasks.
    pub per_repeat: Vec<Vec<f64>>,
    /// One per hold-out task for the MTL methods; empty for STL, which
    /// re-infers from scratch at every budget.
    pub hyper_estimates: Vec<HyperEstimate>,
}

/// method,budget,mean_lpy rows.
pub fn transfer_means_csv(curves: &[TransferCurve]) -> String {
    let mut out = String::from("method,budget,mean_lpy\n");
    for c in curves {
        for (b, m) in c.budgets.iter().zip(&c.mean_lpy) {
            let _ = writeln!(out, "{},{b},{}", c.method_tag, fmt_f64(*m));
        }
    }
    out
}

/// method,budget,repeat,lpy rows.
pub fn transfer_repeats_csv(curves: &[TransferCurve]) -> String {
    let mut out = String::from("method,budget,repeat,lpy\n");
    for c in curves {
        for (bi, b) in c.budgets.iter().enumerate() {
            for (r, v) in c.per_repeat[bi].iter().enumerate() {
                let _ = writeln!(out, "{},{b},{r},{}", c.method_tag, fmt_f64(*v));
            }
        }
    }
    out
}

/// method,task,alpha,lengthscale,noise_sd rows for the carried point estimates.
pub fn transfer_estimates_csv(curves: &[TransferCurve]) -> String {
    let mut out = String::from("method,task,alpha,lengthscale,noise_sd\n");
    for c in curves {
        for e in &c.hyper_estimates {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.method_tag,
                e.task,
                fmt_f64(e.alpha),
                fmt_f64(e.lengthscale),
                fmt_f64(e.noise_sd)
            );
        }
    }
    out
}

/// Posteriors and knobs the transfer experiment draws on. The STL sampler
/// configuration is reused for every per-budget refit (its seed field is
/// ignored; refit seeds derive from `seed`).
pub struct TransferOptions<'a> {
    pub mtl_a: Option<(&'a PosteriorDraws, &'a ParamLayout)>,
    /// Draws, layout, and the training-task separations the joint fit saw.
    pub mtl_b: Option<(&'a PosteriorDraws, &'a ParamLayout, &'a [f64])>,
    pub stl_sampler: SamplerConfig,
    pub priors: PriorConstants,
    pub max_eval_samples: usize,
    pub seed: u64,
}

/// Mean of one named parameter over all draws.
fn posterior_mean(draws: &PosteriorDraws, name: &str) -> Result<f64, EvalError> {
    let idx = draws
        .param_index(name)
        .ok_or_else(|| domain(format!("draws have no parameter named {name}")))?;
    let col = draws.pooled_column(idx);
    Ok(col.iter().sum::<f64>() / col.len() as f64)
}

/// A budget-sized training subset of one hold-out task: `n` of its training
/// points (chosen by `seed`) plus its full, fixed test split.
fn budget_subset(task: &TaskDataset, n: usize, seed: u64) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_inputs = task.train_inputs();
    let train_outputs = task.train_outputs();
    let mut pick = rand::seq::index::sample(&mut rng, train_inputs.len(), n).into_vec();
    pick.sort_unstable();
    let mut inputs = Vec::with_capacity(n + task.n_test());
    let mut outputs = Vec::with_capacity(n + task.n_test());
    let mut split_mask = Vec::with_capacity(n + task.n_test());
    for &i in &pick {
        inputs.push(train_inputs[i]);
        outputs.push(train_outputs[i]);
        split_mask.push(true);
    }
    for (x, y) in task.test_inputs().into_iter().zip(task.test_outputs()) {
        inputs.push(x);
        outputs.push(y);
        split_mask.push(false);
    }
    TaskDataset {
        pair_id: task.pair_id,
        separation: task.separation,
        inputs,
        outputs,
        split_mask,
    }
}

/// lpY of a hold-out subset under fixed kernel parameters and a constant noise
/// level: a single-sample predictive, no inference.
fn point_estimate_lpy(
    sub: &TaskDataset,
    alpha: f64,
    lengthscale: f64,
    noise_sd: f64,
) -> Result<f64, EvalError> {
    let kernel = Matern32Kernel::new(alpha, lengthscale)?;
    let train_inputs = sub.train_inputs();
    let test_inputs = sub.test_inputs();
    let noise_train = vec![noise_sd; train_inputs.len()];
    let noise_test = vec![noise_sd; test_inputs.len()];
    let (mean, cov) = gp_predict(
        &train_inputs,
        &sub.train_outputs(),
        &test_inputs,
        &kernel,
        &noise_train,
        &noise_test,
    )?;
    let means: Vec<f64> = mean.iter().copied().collect();
    let vars: Vec<f64> = (0..test_inputs.len()).map(|i| cov[(i, i)]).collect();
    predictive_lpy_from_moments(&[means], &[vars], &sub.test_outputs())
}

/// Full single-task re-inference on a budget subset, scored on its test split.
fn stl_refit_lpy(
    sub: &TaskDataset,
    opts: &TransferOptions,
    fit_seed: u64,
) -> Result<f64, EvalError> {
    let target = StlTarget::new(sub, &opts.priors)?;
    let mut cfg = opts.stl_sampler.clone();
    cfg.seed = split_seed(fit_seed, 0xC0DE);
    let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(fit_seed, 0x1A17));
    let inits = (0..cfg.chains)
        .map(|_| initialize(&target, &mut init_rng))
        .collect::<Result<Vec<_>, _>>()?;
    let draws = sample(&target, &cfg, &inits)?;
    let tp = predictive_log_likelihood(sub, &draws, target.layout(), 0, opts.max_eval_samples)?;
    Ok(tp.lpy)
}

/// The budget-curve experiment: for each method and training budget N, score
/// the hold-out tasks' fixed test splits after conditioning on N points,
/// repeated over resampled subsets. The subset for a given (task, budget,
/// repeat) is identical across methods. STL re-infers its hyperparameters from
/// the N points alone; the MTL methods carry fixed point estimates from their
/// joint posterior (shared posterior means for MTL-A, separation-conditioned
/// predictions for MTL-B, with exp of the posterior-mean log-noise level as the
/// noise plug-in).
pub fn transfer_experiment(
    population: &[TaskDataset],
    holdout_ids: &[(usize, usize)],
    budgets: &[usize],
    repeats: usize,
    methods: &[Regime],
    opts: &TransferOptions,
) -> Result<Vec<TransferCurve>, EvalError> {
    if budgets.is_empty() {
        return Err(domain("no budgets"));
    }
    if !budgets.windows(2).all(|w| w[0] < w[1]) {
        return Err(domain("budgets must be strictly increasing"));
    }
    if repeats == 0 {
        return Err(domain("repeats must be at least 1"));
    }
    if methods.is_empty() {
        return Err(domain("no methods"));
    }
    let mut holdouts = Vec::with_capacity(holdout_ids.len());
    for id in holdout_ids {
        let task = population
            .iter()
            .find(|t| t.pair_id == *id)
            .ok_or_else(|| domain(format!("hold-out pair {}-{} not in the population", id.0, id.1)))?;
        if task.n_test() == 0 {
            return Err(domain(format!(
                "hold-out task {} has no test points",
                task.pair_label()
            )));
        }
        let max_budget = *budgets.last().expect("nonempty");
        if task.n_train() < max_budget {
            return Err(domain(format!(
                "budget {max_budget} exceeds the {} available training points of task {}",
                task.n_train(),
                task.pair_label()
            )));
        }
        holdouts.push(task);
    }
    if holdouts.is_empty() {
        return Err(domain("no hold-out tasks"));
    }

    // Fixed point estimates, computed once per method and hold-out task.
    let mtl_a_estimates: Option<Vec<HyperEstimate>> = if methods.contains(&Regime::MtlA) {
        let (draws, _) = opts
            .mtl_a
            .ok_or_else(|| domain("mtl_a requested without a joint posterior"))?;
        let alpha = posterior_mean(draws, "alpha")?;
        let lengthscale = posterior_mean(draws, "lengthscale")?;
        let noise_sd = posterior_mean(draws, "noise_mean")?.exp();
        Some(
            holdouts
                .iter()
                .map(|t| HyperEstimate {
                    task: t.pair_label(),
                    alpha,
                    lengthscale,
                    noise_sd,
                })
                .collect(),
        )
    } else {
        None
    };
    let mtl_b_estimates: Option<Vec<HyperEstimate>> = if methods.contains(&Regime::MtlB) {
        let (draws, layout, train_seps) = opts
            .mtl_b
            .ok_or_else(|| domain("mtl_b requested without a joint posterior"))?;
        let noise_sd = posterior_mean(draws, "noise_mean")?.exp();
        let mut ests = Vec::with_capacity(holdouts.len());
        for t in &holdouts {
            let (alpha, lengthscale) = predict_hyperparams(
                draws,
                layout,
                train_seps,
                t.separation,
                opts.max_eval_samples,
            )?;
            ests.push(HyperEstimate {
                task: t.pair_label(),
                alpha,
                lengthscale,
                noise_sd,
            });
        }
        Some(ests)
    } else {
        None
    };

    let mut curves = Vec::with_capacity(methods.len());
    for method in methods {
        let mut per_repeat: Vec<Vec<f64>> = Vec::with_capacity(budgets.len());
        for &budget in budgets {
            let mut totals = Vec::with_capacity(repeats);
            for rep in 0..repeats {
                let mut total = 0.0;
                for (ti, task) in holdouts.iter().enumerate() {
                    let subset_seed = split_seed(
                        split_seed(split_seed(opts.seed, ti as u64), budget as u64),
                        rep as u64,
                    );
                    let sub = budget_subset(task, budget, subset_seed);
                    total += match method {
                        Regime::Stl => stl_refit_lpy(&sub, opts, subset_seed)?,
                        Regime::MtlA => {
                            let e = &mtl_a_estimates.as_ref().expect("validated")[ti];
                            point_estimate_lpy(&sub, e.alpha, e.lengthscale, e.noise_sd)?
                        }
                        Regime::MtlB => {
                            let e = &mtl_b_estimates.as_ref().expect("validated")[ti];
                            point_estimate_lpy(&sub, e.alpha, e.lengthscale, e.noise_sd)?
                        }
                    };
                }
                totals.push(total);
            }
            per_repeat.push(totals);
        }
        let mean_lpy = per_repeat
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let hyper_estimates = match method {
            Regime::Stl => Vec::new(),
            Regime::MtlA => mtl_a_estimates.clone().expect("validated"),
            Regime::MtlB => mtl_b_estimates.clone().expect("validated"),
        };
        curves.push(TransferCurve {
            method_tag: *method,
            budgets: budgets.to_vec(),
            mean_lpy,
            repeats,
            per_repeat,
            hyper_estimates,
        });
    }
    Ok(curves)
}
