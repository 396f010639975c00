//! Multinomial dynamic Hamiltonian Monte Carlo with no-U-turn termination.
//!
//! One transition doubles a trajectory outward in random directions, weighting
//! every visited state by exp(-energy error); the next state is drawn
//! multinomially (inner merges) with a bias toward the newest subtree at the
//! top level. Doubling stops when the span U-turns, the tree depth cap is hit,
//! or a leaf diverges (energy error above 1000).

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{split_seed, PosteriorDraws, SamplerConfig, SamplerError, Target};

const DIVERGENCE_THRESHOLD: f64 = 1000.0;
const DUAL_GAMMA: f64 = 0.05;
const DUAL_T0: f64 = 10.0;
const DUAL_KAPPA: f64 = 0.75;
const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;
const EPS_MIN: f64 = 1e-10;
const EPS_MAX: f64 = 1e2;

struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(inv_mass)
        .map(|(pi, mi)| mi * pi * pi)
        .sum::<f64>()
}

fn hamiltonian(pt: &Point, inv_mass: &[f64]) -> f64 {
    -pt.lp + kinetic(&pt.p, inv_mass)
}

fn leapfrog(target: &impl Target, from: &Point, eps: f64, inv_mass: &[f64]) -> Point {
    let dim = from.q.len();
    let mut p: Vec<f64> = from
        .p
        .iter()
        .zip(&from.grad)
        .map(|(pi, gi)| pi + 0.5 * eps * gi)
        .collect();
    let q: Vec<f64> = from
        .q
        .iter()
        .zip(p.iter().zip(inv_mass))
        .map(|(qi, (pi, mi))| qi + eps * mi * pi)
        .collect();
    let mut grad = vec![0.0; dim];
    let lp = if q.iter().all(|v| v.is_finite()) {
        target.log_density_and_grad(&q, &mut grad)
    } else {
        f64::NEG_INFINITY
    };
    for (pi, gi) in p.iter_mut().zip(&grad) {
        *pi += 0.5 * eps * gi;
    }
    Point { q, p, grad, lp }
}

/// U-turn of the span from `minus` to `plus`: the span vector opposes the
/// velocity at either end.
fn is_uturn(minus: &Point, plus: &Point, inv_mass: &[f64]) -> bool {
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..minus.q.len() {
        let dq = plus.q[i] - minus.q[i];
        dot_minus += dq * inv_mass[i] * minus.p[i];
        dot_plus += dq * inv_mass[i] * plus.p[i];
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Subtree {
    /// Endpoint on the side the subtree grew from.
    begin: Rc<Point>,
    /// Frontier endpoint in the growth direction.
    end: Rc<Point>,
    proposal: Rc<Point>,
    log_w: f64,
    accept_sum: f64,
    n_leaf: f64,
    turning: bool,
    divergent: bool,
}

#[allow(clippy::too_many_arguments)]
fn build_tree(
    target: &impl Target,
    depth: usize,
    from: &Rc<Point>,
    dir: f64,
    eps: f64,
    h0: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> Subtree {
    if depth == 0 {
        let pt = Rc::new(leapfrog(target, from, dir * eps, inv_mass));
        let h = hamiltonian(&pt, inv_mass);
        let (log_w, accept, divergent) = if h.is_finite() {
            let dh = h - h0;
            (-dh, (-dh).exp().min(1.0), dh > DIVERGENCE_THRESHOLD)
        } else {
            (f64::NEG_INFINITY, 0.0, true)
        };
        return Subtree {
            begin: pt.clone(),
            end: pt.clone(),
            proposal: pt,
            log_w,
            accept_sum: accept,
            n_leaf: 1.0,
            turning: false,
            divergent,
        };
    }
    let first = build_tree(target, depth - 1, from, dir, eps, h0, inv_mass, rng);
    if first.turning || first.divergent {
        return first;
    }
    let second = build_tree(target, depth - 1, &first.end, dir, eps, h0, inv_mass, rng);
    let log_w = logaddexp(first.log_w, second.log_w);
    let accept_sum = first.accept_sum + second.accept_sum;
    let n_leaf = first.n_leaf + second.n_leaf;
    if second.turning || second.divergent {
        return Subtree {
            begin: first.begin,
            end: second.end,
            proposal: first.proposal,
            log_w,
            accept_sum,
            n_leaf,
            turning: second.turning,
            divergent: second.divergent,
        };
    }
    // Multinomial merge: pick the newer proposal with probability proportional
    // to its subtree weight.
    let proposal = if rng.gen::<f64>().ln() < second.log_w - log_w {
        second.proposal
    } else {
        first.proposal
    };
    let begin = first.begin;
    let end = second.end;
    let turning = {
        let (minus, plus) = if dir > 0.0 { (&begin, &end) } else { (&end, &begin) };
        is_uturn(minus, plus, inv_mass)
    };
    Subtree {
        begin,
        end,
        proposal,
        log_w,
        accept_sum,
        n_leaf,
        turning,
        divergent: false,
    }
}

struct Transition {
    point: Rc<Point>,
    divergent: bool,
    accept: f64,
}

fn transition(
    target: &impl Target,
    start: Rc<Point>,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    let h0 = hamiltonian(&start, inv_mass);
    let mut left = start.clone();
    let mut right = start.clone();
    let mut sample = start;
    let mut log_w = 0.0_f64;
    let mut accept_sum = 0.0;
    let mut n_leaf = 0.0;
    let mut divergent = false;
    for depth in 0..max_depth {
        let dir: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let from = if dir > 0.0 { right.clone() } else { left.clone() };
        let sub = build_tree(target, depth, &from, dir, eps, h0, inv_mass, rng);
        accept_sum += sub.accept_sum;
        n_leaf += sub.n_leaf;
        if sub.divergent {
            divergent = true;
            break;
        }
        if sub.turning {
            break;
        }
        // Biased progressive sampling: favors the fresh half of the doubled
        // trajectory, accepting it with probability min(1, w_new / w_old).
        if rng.gen::<f64>().ln() < sub.log_w - log_w {
            sample = sub.proposal.clone();
        }
        log_w = logaddexp(log_w, sub.log_w);
        if dir > 0.0 {
            right = sub.end;
        } else {
            left = sub.end;
        }
        if is_uturn(&left, &right, inv_mass) {
            break;
        }
    }
    Transition {
        point: sample,
        divergent,
        accept: if n_leaf > 0.0 { accept_sum / n_leaf } else { 0.0 },
    }
}

fn resample_momentum(pt: &Point, inv_mass: &[f64], rng: &mut ChaCha8Rng) -> Rc<Point> {
    let p: Vec<f64> = inv_mass
        .iter()
        .map(|mi| {
            let z: f64 = rng.sample(StandardNormal);
            z / mi.sqrt()
        })
        .collect();
    Rc::new(Point {
        q: pt.q.clone(),
        p,
        grad: pt.grad.clone(),
        lp: pt.lp,
    })
}

/// Doubling/halving search for a step size whose one-step acceptance crosses
/// one half.
fn find_reasonable_epsilon(
    target: &impl Target,
    pt: &Point,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let probe = resample_momentum(pt, inv_mass, rng);
    let h0 = hamiltonian(&probe, inv_mass);
    let ratio_at = |e: f64| -> f64 {
        let next = leapfrog(target, &probe, e, inv_mass);
        let h = hamiltonian(&next, inv_mass);
        if h.is_finite() {
            (h0 - h).exp()
        } else {
            0.0
        }
    };
    let mut eps = 1.0_f64;
    let mut ratio = ratio_at(eps);
    let a: f64 = if ratio > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..50 {
        if ratio.powf(a) <= 2.0_f64.powf(-a) {
            break;
        }
        let next = eps * 2.0_f64.powf(a);
        if !(EPS_MIN..=EPS_MAX).contains(&next) {
            break;
        }
        eps = next;
        ratio = ratio_at(eps);
    }
    eps.clamp(EPS_MIN, EPS_MAX)
}

struct DualAvg {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target_accept: f64,
}

impl DualAvg {
    fn new(eps0: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            target_accept,
        }
    }

    fn update(&mut self, accept: f64) {
        self.m += 1.0;
        let eta = 1.0 / (self.m + DUAL_T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept);
        self.log_eps = self.mu - self.m.sqrt() / DUAL_GAMMA * self.h_bar;
        let w = self.m.powf(-DUAL_KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp().clamp(EPS_MIN, EPS_MAX)
    }

    fn finalized(&self) -> f64 {
        if self.m > 0.0 {
            self.log_eps_bar.exp().clamp(EPS_MIN, EPS_MAX)
        } else {
            self.current()
        }
    }
}

/// The mass-matrix estimation windows a run with this warmup length will use,
/// as [start, end) iteration ranges. Exposed so front-ends can echo the
/// adaptation plan.
pub fn warmup_windows(warmup: usize) -> Vec<(usize, usize)> {
    build_schedule(warmup)
}

/// Mass-matrix estimation windows [start, end) within warmup: a fixed initial
/// buffer, doubling windows, and a terminal buffer, shrunk proportionally for
/// short warmups.
fn build_schedule(warmup: usize) -> Vec<(usize, usize)> {
    if warmup >= INIT_BUFFER + TERM_BUFFER + BASE_WINDOW {
        let adapt_end = warmup - TERM_BUFFER;
        let mut windows = Vec::new();
        let mut start = INIT_BUFFER;
        let mut w = BASE_WINDOW;
        while start < adapt_end {
            let mut end = start + w;
            if end + 2 * w > adapt_end {
                end = adapt_end;
            }
            windows.push((start, end));
            w *= 2;
            start = end;
        }
        return windows;
    }
    let init = ((warmup as f64 * 0.15).round() as usize).max(1);
    let term = ((warmup as f64 * 0.10).round() as usize).max(1);
    if warmup > init + term && warmup - init - term >= 2 {
        vec![(init, warmup - term)]
    } else {
        Vec::new()
    }
}

struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / self.count;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate written into the inverse mass, shrunk
    /// toward 1e-3 exactly as in common adaptive HMC implementations.
    fn apply(&self, inv_mass: &mut [f64]) {
        if self.count < 5.0 {
            return;
        }
        let n = self.count;
        for i in 0..inv_mass.len() {
            let var = self.m2[i] / (n - 1.0);
            let reg = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            inv_mass[i] = reg.max(1e-10);
        }
    }
}

struct ChainOutput {
    draws: Vec<f64>,
    divergences: Vec<bool>,
    step_size: f64,
    accept_mean: f64,
}

fn run_chain<T: Target>(
    target: &T,
    init: &[f64],
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput, SamplerError> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, chain as u64));
    let mut grad = vec![0.0; dim];
    let lp = target.log_density_and_grad(init, &mut grad);
    if !lp.is_finite() {
        return Err(SamplerError::Init(format!(
            "chain {chain}: log density is {lp} at the initial state"
        )));
    }
    let mut cur = Rc::new(Point {
        q: init.to_vec(),
        p: vec![0.0; dim],
        grad,
        lp,
    });
    let mut inv_mass = vec![1.0; dim];
    let mut eps = find_reasonable_epsilon(target, &cur, &inv_mass, &mut rng);
    let mut da = DualAvg::new(eps, config.target_accept);
    let windows = build_schedule(config.warmup_iters);
    let mut widx = 0;
    let mut welford: Option<Welford> = None;

    for it in 0..config.warmup_iters {
        if widx < windows.len() && it == windows[widx].0 {
            welford = Some(Welford::new(dim));
        }
        let start = resample_momentum(&cur, &inv_mass, &mut rng);
        let tr = transition(target, start, eps, &inv_mass, config.max_tree_depth, &mut rng);
        cur = tr.point;
        da.update(tr.accept);
        eps = da.current();
        if let Some(w) = welford.as_mut() {
            w.push(&cur.q);
        }
        if widx < windows.len() && it + 1 == windows[widx].1 {
            if let Some(w) = welford.take() {
                w.apply(&mut inv_mass);
            }
            widx += 1;
        }
    }
    eps = da.finalized();

    let mut draws = Vec::with_capacity(config.sampling_iters * dim);
    let mut divergences = Vec::with_capacity(config.sampling_iters);
    let mut accept_total = 0.0;
    for _ in 0..config.sampling_iters {
        let start = resample_momentum(&cur, &inv_mass, &mut rng);
        let tr = transition(target, start, eps, &inv_mass, config.max_tree_depth, &mut rng);
        cur = tr.point;
        draws.extend(target.constrain(&cur.q));
        divergences.push(tr.divergent);
        accept_total += tr.accept;
    }
    Ok(ChainOutput {
        draws,
        divergences,
        step_size: eps,
        accept_mean: accept_total / config.sampling_iters as f64,
    })
}

/// Run `config.chains` independent chains (in parallel) from the given initial
/// states, one per chain, and merge the post-warmup draws in chain order.
pub fn sample<T: Target>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let dim = target.dim();
    if inits.len() != config.chains {
        return Err(SamplerError::Config(format!(
            "{} initial states for {} chains",
            inits.len(),
            config.chains
        )));
    }
    for (c, init) in inits.iter().enumerate() {
        if init.len() != dim {
            return Err(SamplerError::Config(format!(
                "chain {c}: initial state has length {} but the target has dimension {dim}",
                init.len()
            )));
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::Init(format!(
                "chain {c}: non-finite coordinate in the initial state"
            )));
        }
    }
    let outputs: Result<Vec<ChainOutput>, SamplerError> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, &inits[c], config, c))
        .collect();
    let outputs = outputs?;

    let names = target.param_names();
    let mut draws = Vec::with_capacity(config.chains * config.sampling_iters * dim);
    let mut divergence_flags = Vec::with_capacity(config.chains);
    let mut step_size = Vec::with_capacity(config.chains);
    let mut accept_mean = Vec::with_capacity(config.chains);
    for out in outputs {
        draws.extend(out.draws);
        divergence_flags.push(out.divergences);
        step_size.push(out.step_size);
        accept_mean.push(out.accept_mean);
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::Numerical(
            "a recorded draw is non-finite".into(),
        ));
    }
    PosteriorDraws::from_parts(
        names,
        config.chains,
        config.sampling_iters,
        draws,
        divergence_flags,
        step_size,
        accept_mean,
    )
}

/// |H(end) - H(start)| after `steps` leapfrog steps of size `eps` from the
/// given phase-space point. Exposes the integrator for order diagnostics: on
/// smooth targets the drift over a fixed path length scales as eps^2.
pub fn hamiltonian_drift<T: Target>(
    target: &T,
    q0: &[f64],
    p0: &[f64],
    inv_mass: &[f64],
    eps: f64,
    steps: usize,
) -> f64 {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    let lp = target.log_density_and_grad(q0, &mut grad);
    let mut pt = Point {
        q: q0.to_vec(),
        p: p0.to_vec(),
        grad,
        lp,
    };
    let h0 = hamiltonian(&pt, inv_mass);
    for _ in 0..steps {
        pt = leapfrog(target, &pt, eps, inv_mass);
    }
    (hamiltonian(&pt, inv_mass) - h0).abs()
}
