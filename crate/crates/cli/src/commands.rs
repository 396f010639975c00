//! One function per subcommand. Stages communicate through files in the output
//! directory; human-readable progress goes to standard error only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plategp::datagen::{
    fmt_f64, load_dataset, save_dataset, simulate_population, split, TaskDataset,
};
use plategp::eval::{
    compare_methods, predict_hyperparams, predictive_log_likelihood, transfer_estimates_csv,
    transfer_experiment, transfer_means_csv, transfer_repeats_csv, CompareEntry, MethodPosterior,
    TransferOptions,
};
use plategp::inference::{
    diagnose, initialize, sample, split_seed, warmup_windows, Diagnostics, PosteriorDraws,
    SamplerConfig, Target,
};
use plategp::model::{MtlATarget, MtlBTarget, ParamLayout, Regime, StlTarget};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_pair, RunConfig};
use crate::CliError;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub allow_nonconverged: bool,
}

const POPULATION_CSV: &str = "population.csv";
const METADATA_JSON: &str = "metadata.json";
const HYPERPRED_CSV: &str = "hyperpred_mtl_b.csv";
const EVALUATION_CSV: &str = "evaluation.csv";
const TRANSFER_MEANS_CSV: &str = "transfer_means.csv";
const TRANSFER_REPEATS_CSV: &str = "transfer_repeats.csv";
const TRANSFER_ESTIMATES_CSV: &str = "transfer_estimates.csv";

fn draws_file(regime: Regime, task: Option<&str>) -> String {
    match task {
        Some(label) => format!("draws_{regime}_{label}.csv"),
        None => format!("draws_{regime}.csv"),
    }
}

fn diagnostics_file(regime: Regime) -> String {
    format!("diagnostics_{regime}.json")
}

fn predictions_file(regime: Regime) -> String {
    format!("predictions_{regime}.csv")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

struct Workspace {
    population: Vec<TaskDataset>,
}

fn load_workspace(ctx: &Ctx) -> Result<Workspace, CliError> {
    let (population, _, _) = load_dataset(
        &ctx.out.join(POPULATION_CSV),
        &ctx.out.join(METADATA_JSON),
    )?;
    Ok(Workspace { population })
}

fn holdout_ids(cfg: &RunConfig) -> Result<Vec<(usize, usize)>, CliError> {
    let mut ids = Vec::with_capacity(cfg.eval.holdouts.len());
    for label in &cfg.eval.holdouts {
        let id = parse_pair(label)?;
        if ids.contains(&id) {
            return Err(CliError::Config(format!("hold-out {label} listed twice")));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// The configured training selection (default: every task) minus hold-outs,
/// in a deterministic order: population order, or config order when
/// model.tasks is explicit.
fn training_tasks<'a>(
    cfg: &RunConfig,
    population: &'a [TaskDataset],
) -> Result<Vec<&'a TaskDataset>, CliError> {
    let holdouts = holdout_ids(cfg)?;
    for id in &holdouts {
        if !population.iter().any(|t| t.pair_id == *id) {
            return Err(CliError::Config(format!(
                "hold-out {}-{} not present in the dataset",
                id.0, id.1
            )));
        }
    }
    let mut selected: Vec<&TaskDataset> = Vec::new();
    if cfg.model.tasks.is_empty() {
        selected.extend(
            population
                .iter()
                .filter(|t| !holdouts.contains(&t.pair_id)),
        );
    } else {
        for label in &cfg.model.tasks {
            let id = parse_pair(label)?;
            if holdouts.contains(&id) {
                return Err(CliError::Config(format!(
                    "task {label} is both selected and held out"
                )));
            }
            if selected.iter().any(|t| t.pair_id == id) {
                return Err(CliError::Config(format!("task {label} listed twice")));
            }
            let task = population
                .iter()
                .find(|t| t.pair_id == id)
                .ok_or_else(|| {
                    CliError::Config(format!("task {label} not present in the dataset"))
                })?;
            selected.push(task);
        }
    }
    if selected.is_empty() {
        return Err(CliError::Config(
            "no training tasks left after excluding hold-outs".into(),
        ));
    }
    Ok(selected)
}

pub fn cmd_generate(ctx: &Ctx) -> Result<(), CliError> {
    let plate = ctx.cfg.plate.to_plate_config();
    let (raw, record) = simulate_population(&plate)?;
    let n_train = ctx.cfg.model.n_train;
    let mut population = Vec::with_capacity(raw.len());
    for (k, task) in raw.iter().enumerate() {
        if n_train >= task.len() {
            return Err(CliError::Config(format!(
                "model.n_train = {} leaves no test points for task {} ({} points)",
                n_train,
                task.pair_label(),
                task.len()
            )));
        }
        let seed = split_seed(split_seed(plate.seed, 0x5411), k as u64);
        population.push(split(task, n_train, seed)?);
    }
    save_dataset(
        &population,
        &plate,
        &record,
        &ctx.out.join(POPULATION_CSV),
        &ctx.out.join(METADATA_JSON),
    )?;
    eprintln!(
        "generated {} tasks x {} points ({} train / {} test each); \
         input scale {}, output mean {}, output std {}",
        population.len(),
        plate.source_grid.len(),
        n_train,
        plate.source_grid.len() - n_train,
        record.input_scale,
        record.output_mean,
        record.output_std
    );
    Ok(())
}

fn float_or_null(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

/// Draw the initial states, run the chains, save the draws, and diagnose.
fn fit_one<T: Target>(
    target: &T,
    cfg: &SamplerConfig,
    tag: &str,
    out_csv: &Path,
) -> Result<(PosteriorDraws, Diagnostics, bool), CliError> {
    eprintln!(
        "fit {tag}: {} chains x ({} warmup + {} sampling) iterations, {} parameters",
        cfg.chains,
        cfg.warmup_iters,
        cfg.sampling_iters,
        target.dim()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, 0x1A17));
    let mut inits = Vec::with_capacity(cfg.chains);
    for _ in 0..cfg.chains {
        inits.push(initialize(target, &mut rng)?);
    }
    let draws = sample(target, cfg, &inits)?;
    draws.save_csv(out_csv)?;
    let diag = diagnose(&draws);
    let converged = !diag.any_rhat_undefined() && diag.max_rhat() <= 1.05;
    eprintln!(
        "fit {tag}: done; max split-Rhat {:.4}, {} divergent transitions, wrote {}",
        diag.max_rhat(),
        diag.divergence_count,
        out_csv.display()
    );
    Ok((draws, diag, converged))
}

fn fit_report(draws: &PosteriorDraws, diag: &Diagnostics, converged: bool) -> serde_json::Value {
    let mut v = diag.named_json(draws.names());
    let obj = v.as_object_mut().expect("named_json returns an object");
    obj.insert("step_size".into(), serde_json::json!(draws.step_size()));
    obj.insert("accept_mean".into(), serde_json::json!(draws.accept_mean()));
    obj.insert("max_rhat".into(), float_or_null(diag.max_rhat()));
    obj.insert("converged".into(), serde_json::json!(converged));
    v
}

pub fn cmd_fit(ctx: &Ctx) -> Result<(), CliError> {
    let ws = load_workspace(ctx)?;
    let tasks = training_tasks(&ctx.cfg, &ws.population)?;
    let regime = ctx.cfg.model.regime;
    let priors = ctx.cfg.model.priors;
    let sc = &ctx.cfg.sampler;
    for (i, (a, b)) in warmup_windows(sc.warmup_iters).iter().enumerate() {
        eprintln!(
            "sampler window {}: mass adaptation over warmup iterations {a}..{b}",
            i + 1
        );
    }

    let labels: Vec<String> = tasks.iter().map(|t| t.pair_label()).collect();
    let mut fits = serde_json::Map::new();
    let mut all_converged = true;
    let mut worst_defined = f64::NEG_INFINITY;
    let mut any_undefined = false;

    match regime {
        Regime::Stl => {
            for (k, task) in tasks.iter().enumerate() {
                let target = StlTarget::new(task, &priors)?;
                let mut cfg = sc.clone();
                cfg.seed = split_seed(sc.seed, 100 + k as u64);
                let label = task.pair_label();
                let out_csv = ctx.out.join(draws_file(regime, Some(&label)));
                let (draws, diag, conv) =
                    fit_one(&target, &cfg, &format!("stl task {label}"), &out_csv)?;
                all_converged &= conv;
                any_undefined |= diag.any_rhat_undefined();
                worst_defined = worst_defined.max(diag.max_rhat());
                fits.insert(label, fit_report(&draws, &diag, conv));
            }
        }
        Regime::MtlA | Regime::MtlB => {
            let owned: Vec<TaskDataset> = tasks.iter().map(|t| (*t).clone()).collect();
            let out_csv = ctx.out.join(draws_file(regime, None));
            let (draws, diag, conv) = match regime {
                Regime::MtlA => {
                    let target = MtlATarget::new(&owned, &priors)?;
                    fit_one(&target, sc, "mtl_a joint", &out_csv)?
                }
                _ => {
                    let target = MtlBTarget::new(&owned, &priors)?;
                    fit_one(&target, sc, "mtl_b joint", &out_csv)?
                }
            };
            all_converged &= conv;
            any_undefined |= diag.any_rhat_undefined();
            worst_defined = worst_defined.max(diag.max_rhat());
            fits.insert("joint".into(), fit_report(&draws, &diag, conv));
        }
    }

    let json = serde_json::json!({
        "regime": regime.to_string(),
        "tasks": labels,
        "sampler": sc,
        "priors": priors,
        "fits": fits,
        "converged": all_converged,
    });
    let mut text =
        serde_json::to_string_pretty(&json).expect("diagnostics report serializes");
    text.push('\n');
    write_text(&ctx.out.join(diagnostics_file(regime)), &text)?;

    if !all_converged && !ctx.allow_nonconverged {
        let detail = if any_undefined {
            "split-Rhat is undefined for at least one parameter (single chain, too few \
             draws, or a constant parameter)"
                .to_string()
        } else {
            format!("max split-Rhat {worst_defined:.4} exceeds 1.05")
        };
        return Err(CliError::Convergence(format!(
            "{detail}; outputs were written; pass --allow-nonconverged to accept them"
        )));
    }
    Ok(())
}

enum LoadedPosterior {
    PerTask(Vec<(PosteriorDraws, ParamLayout)>),
    Joint(PosteriorDraws, ParamLayout),
}

fn check_names(
    draws: &PosteriorDraws,
    layout: &ParamLayout,
    file: &str,
) -> Result<(), CliError> {
    if draws.dim() != layout.dim() || draws.names() != layout.names() {
        return Err(CliError::Config(format!(
            "draws file {file}: parameter names do not match the {} layout of the \
             configured tasks (refit or fix the task selection)",
            layout.regime()
        )));
    }
    Ok(())
}

fn load_posterior(
    ctx: &Ctx,
    regime: Regime,
    tasks: &[&TaskDataset],
) -> Result<LoadedPosterior, CliError> {
    match regime {
        Regime::Stl => {
            let mut fits = Vec::with_capacity(tasks.len());
            for task in tasks {
                let file = draws_file(regime, Some(&task.pair_label()));
                let draws = PosteriorDraws::load_csv(&ctx.out.join(&file))?;
                let layout = ParamLayout::stl(task.n_train());
                check_names(&draws, &layout, &file)?;
                fits.push((draws, layout));
            }
            Ok(LoadedPosterior::PerTask(fits))
        }
        Regime::MtlA | Regime::MtlB => {
            let file = draws_file(regime, None);
            let draws = PosteriorDraws::load_csv(&ctx.out.join(&file))?;
            let sizes: Vec<usize> = tasks.iter().map(|t| t.n_train()).collect();
            let layout = match regime {
                Regime::MtlA => ParamLayout::mtl_a(&sizes),
                _ => ParamLayout::mtl_b(&sizes),
            };
            check_names(&draws, &layout, &file)?;
            Ok(LoadedPosterior::Joint(draws, layout))
        }
    }
}

/// The task rebuilt so its training points also appear as test points, for
/// scoring the posterior predictive at the training inputs themselves.
fn train_as_test(task: &TaskDataset) -> TaskDataset {
    let tr_in = task.train_inputs();
    let tr_out = task.train_outputs();
    let n = tr_in.len();
    TaskDataset {
        pair_id: task.pair_id,
        separation: task.separation,
        inputs: tr_in.iter().chain(tr_in.iter()).copied().collect(),
        outputs: tr_out.iter().chain(tr_out.iter()).copied().collect(),
        split_mask: (0..2 * n).map(|i| i < n).collect(),
    }
}

pub fn cmd_predict(ctx: &Ctx) -> Result<(), CliError> {
    let ws = load_workspace(ctx)?;
    let tasks = training_tasks(&ctx.cfg, &ws.population)?;
    let regime = ctx.cfg.model.regime;
    let max_samples = ctx.cfg.eval.max_samples;
    let posterior = load_posterior(ctx, regime, &tasks)?;

    let mut csv = String::from("task,split,x1,x2,y,pred_mean,pred_var\n");
    let mut rows = 0usize;
    for (k, task) in tasks.iter().enumerate() {
        let (draws, layout, task_index) = match &posterior {
            LoadedPosterior::PerTask(fits) => (&fits[k].0, &fits[k].1, 0),
            LoadedPosterior::Joint(draws, layout) => (draws, layout, k),
        };
        let test = predictive_log_likelihood(task, draws, layout, task_index, max_samples)?;
        let train = predictive_log_likelihood(
            &train_as_test(task),
            draws,
            layout,
            task_index,
            max_samples,
        )?;
        let label = task.pair_label();
        let (mut ti, mut si) = (0usize, 0usize);
        for ((x, y), m) in task.inputs.iter().zip(&task.outputs).zip(&task.split_mask) {
            let (split, mean, var) = if *m {
                let v = ("train", train.point_mean[si], train.point_var[si]);
                si += 1;
                v
            } else {
                let v = ("test", test.point_mean[ti], test.point_var[ti]);
                ti += 1;
                v
            };
            let _ = writeln!(
                csv,
                "{label},{split},{},{},{},{},{}",
                fmt_f64(x[0]),
                fmt_f64(x[1]),
                fmt_f64(*y),
                fmt_f64(mean),
                fmt_f64(var)
            );
            rows += 1;
        }
    }
    let pred_path = ctx.out.join(predictions_file(regime));
    write_text(&pred_path, &csv)?;
    eprintln!(
        "predict {regime}: wrote {rows} rows to {}",
        pred_path.display()
    );

    if regime == Regime::MtlB {
        let (draws, layout) = match &posterior {
            LoadedPosterior::Joint(d, l) => (d, l),
            _ => unreachable!("mtl_b posterior is joint"),
        };
        let train_seps: Vec<f64> = tasks.iter().map(|t| t.separation).collect();
        let targets = if ctx.cfg.eval.predict_separations.is_empty() {
            train_seps.clone()
        } else {
            ctx.cfg.eval.predict_separations.clone()
        };
        let mut hp = String::from("sep,alpha,lengthscale\n");
        for sep in &targets {
            let (alpha, lengthscale) =
                predict_hyperparams(draws, layout, &train_seps, *sep, max_samples)?;
            let _ = writeln!(
                hp,
                "{},{},{}",
                fmt_f64(*sep),
                fmt_f64(alpha),
                fmt_f64(lengthscale)
            );
        }
        let hp_path = ctx.out.join(HYPERPRED_CSV);
        write_text(&hp_path, &hp)?;
        eprintln!(
            "predict {regime}: wrote {} hyperparameter predictions to {}",
            targets.len(),
            hp_path.display()
        );
    }
    Ok(())
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<(), CliError> {
    let ws = load_workspace(ctx)?;
    let tasks = training_tasks(&ctx.cfg, &ws.population)?;
    let methods = ctx.cfg.methods()?;
    let mut loaded = Vec::with_capacity(methods.len());
    for m in &methods {
        loaded.push((m.to_string(), load_posterior(ctx, *m, &tasks)?));
    }
    let entries: Vec<CompareEntry> = loaded
        .iter()
        .map(|(name, lp)| CompareEntry {
            name: name.clone(),
            posterior: match lp {
                LoadedPosterior::PerTask(fits) => {
                    MethodPosterior::PerTask(fits.iter().map(|(d, l)| (d, l)).collect())
                }
                LoadedPosterior::Joint(d, l) => MethodPosterior::Joint(d, l),
            },
        })
        .collect();
    let scored: Vec<TaskDataset> = tasks.iter().map(|t| (*t).clone()).collect();
    let report = compare_methods(&scored, &entries, ctx.cfg.eval.max_samples)?;
    let path = ctx.out.join(EVALUATION_CSV);
    write_text(&path, &report.to_csv())?;
    for (m, total) in report.methods.iter().zip(&report.totals) {
        eprintln!(
            "evaluate {m}: total lpY {total:.4} over {} tasks",
            report.task_labels.len()
        );
    }
    eprintln!("evaluate: wrote {}", path.display());
    Ok(())
}

pub fn cmd_transfer(ctx: &Ctx) -> Result<(), CliError> {
    let ws = load_workspace(ctx)?;
    let tasks = training_tasks(&ctx.cfg, &ws.population)?;
    let holdouts = holdout_ids(&ctx.cfg)?;
    if holdouts.is_empty() {
        return Err(CliError::Config(
            "transfer requires at least one hold-out task in eval.holdouts".into(),
        ));
    }
    let methods = ctx.cfg.methods()?;

    let mtl_a_store = if methods.contains(&Regime::MtlA) {
        match load_posterior(ctx, Regime::MtlA, &tasks)? {
            LoadedPosterior::Joint(d, l) => Some((d, l)),
            _ => unreachable!("mtl_a posterior is joint"),
        }
    } else {
        None
    };
    let mtl_b_store = if methods.contains(&Regime::MtlB) {
        match load_posterior(ctx, Regime::MtlB, &tasks)? {
            LoadedPosterior::Joint(d, l) => Some((d, l)),
            _ => unreachable!("mtl_b posterior is joint"),
        }
    } else {
        None
    };
    let train_seps: Vec<f64> = tasks.iter().map(|t| t.separation).collect();

    let opts = TransferOptions {
        mtl_a: mtl_a_store.as_ref().map(|(d, l)| (d, l)),
        mtl_b: mtl_b_store
            .as_ref()
            .map(|(d, l)| (d, l, train_seps.as_slice())),
        stl_sampler: ctx.cfg.sampler.clone(),
        priors: ctx.cfg.model.priors,
        max_eval_samples: ctx.cfg.eval.max_samples,
        seed: ctx.cfg.eval.seed,
    };
    eprintln!(
        "transfer: {} methods x {} budgets x {} repeats on {} hold-out tasks",
        methods.len(),
        ctx.cfg.eval.budgets.len(),
        ctx.cfg.eval.repeats,
        holdouts.len()
    );
    let curves = transfer_experiment(
        &ws.population,
        &holdouts,
        &ctx.cfg.eval.budgets,
        ctx.cfg.eval.repeats,
        &methods,
        &opts,
    )?;
    write_text(&ctx.out.join(TRANSFER_MEANS_CSV), &transfer_means_csv(&curves))?;
    write_text(
        &ctx.out.join(TRANSFER_REPEATS_CSV),
        &transfer_repeats_csv(&curves),
    )?;
    write_text(
        &ctx.out.join(TRANSFER_ESTIMATES_CSV),
        &transfer_estimates_csv(&curves),
    )?;
    for c in &curves {
        for (b, m) in c.budgets.iter().zip(&c.mean_lpy) {
            eprintln!("transfer {}: budget {b} mean lpY {m:.4}", c.method_tag);
        }
    }
    Ok(())
}
