//! Convergence diagnostics on recorded draws: split-Rhat and rank-normalized
//! bulk effective sample size, computed per parameter over half-chains.

use serde::Serialize;
use serde_json::{json, Value};

use super::PosteriorDraws;

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Split-Rhat per parameter (NaN when undefined: one chain, too few draws,
    /// or a constant parameter).
    pub rhat: Vec<f64>,
    /// Rank-normalized bulk ESS per parameter (NaN when degenerate).
    pub ess_bulk: Vec<f64>,
    pub divergence_count: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn any_rhat_undefined(&self) -> bool {
        self.rhat.iter().any(|r| r.is_nan())
    }

    /// JSON object keyed by parameter name; NaN becomes null.
    pub fn named_json(&self, names: &[String]) -> Value {
        let float = |v: f64| match serde_json::Number::from_f64(v) {
            Some(n) => Value::Number(n),
            None => Value::Null,
        };
        let map = |vals: &[f64]| -> Value {
            let mut obj = serde_json::Map::new();
            for (name, v) in names.iter().zip(vals) {
                obj.insert(name.clone(), float(*v));
            }
            Value::Object(obj)
        };
        json!({
            "rhat": map(&self.rhat),
            "ess_bulk": map(&self.ess_bulk),
            "divergence_count": self.divergence_count,
            "warnings": self.warnings,
        })
    }
}

/// Each chain contributes its two halves as separate sequences. Draws beyond an
/// even split (odd iteration counts) are dropped from the middle.
fn split_sequences(draws: &PosteriorDraws, param: usize) -> Vec<Vec<f64>> {
    let iters = draws.iters();
    let half = iters / 2;
    let mut seqs = Vec::with_capacity(2 * draws.chains());
    for chain in 0..draws.chains() {
        let col = draws.chain_column(chain, param);
        seqs.push(col[..half].to_vec());
        seqs.push(col[iters - half..].to_vec());
    }
    seqs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split-Rhat over the given equal-length sequences.
fn rhat_of(seqs: &[Vec<f64>]) -> f64 {
    let m = seqs.len() as f64;
    let n = seqs[0].len() as f64;
    let w = seqs.iter().map(|s| sample_var(s)).sum::<f64>() / m;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let b_over_n = sample_var(&means);
    if !(w > 0.0) || !w.is_finite() || !b_over_n.is_finite() {
        return f64::NAN;
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Inverse standard-normal CDF (Acklam's rational approximation).
fn inv_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Average ranks (ties averaged), 1-based, then mapped through the normal
/// quantile function with the standard offset continuity correction.
fn rank_normalize(pooled: &[f64]) -> Vec<f64> {
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).expect("finite draws"));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg_rank;
        }
        i = j + 1;
    }
    ranks
        .iter()
        .map(|r| inv_normal_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect()
}

/// Autocovariance at lag `t` with 1/n normalization.
fn autocov(xs: &[f64], m: f64, t: usize) -> f64 {
    let n = xs.len();
    let mut acc = 0.0;
    for i in 0..n - t {
        acc += (xs[i] - m) * (xs[i + t] - m);
    }
    acc / n as f64
}

/// Effective sample size of the given equal-length sequences via paired
/// autocorrelation sums with initial-positive and monotone truncation.
fn ess_of(seqs: &[Vec<f64>]) -> f64 {
    let m = seqs.len() as f64;
    let n = seqs[0].len();
    let nf = n as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let chain_vars: Vec<f64> = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| autocov(s, *mu, 0) * nf / (nf - 1.0))
        .collect();
    let w = chain_vars.iter().sum::<f64>() / m;
    let b_over_n = if seqs.len() > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return f64::NAN;
    }
    let mean_acov = |t: usize| -> f64 {
        seqs.iter()
            .zip(&means)
            .map(|(s, mu)| autocov(s, *mu, t))
            .sum::<f64>()
            / m
    };
    let rho = |t: usize| -> f64 {
        if t == 0 {
            1.0
        } else {
            1.0 - (w - mean_acov(t)) / var_plus
        }
    };

    // Geyer pairs P_k = rho_{2k} + rho_{2k+1}: keep while positive, force
    // monotone decrease, stop when lags run out.
    let mut pair_sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0usize;
    while 2 * k + 1 < n {
        let mut pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev {
            pair = prev;
        }
        pair_sum += pair;
        prev = pair;
        k += 1;
    }
    let total = m * nf;
    let tau = (2.0 * pair_sum - 1.0).max(1.0 / total);
    (total / tau).min(total)
}

/// Split-Rhat and rank-normalized bulk ESS per parameter, plus the divergence
/// total and any caveats (single chain, short chains, constant parameters,
/// high divergence rate).
pub fn diagnose(draws: &PosteriorDraws) -> Diagnostics {
    let dim = draws.dim();
    let mut warnings = Vec::new();
    let divergence_count = draws.divergence_count();
    let total = draws.total_draws();
    if total > 0 && divergence_count as f64 > 0.2 * total as f64 {
        warnings.push(format!(
            "{divergence_count} of {total} transitions diverged (over 20%); the draws are unreliable"
        ));
    }
    if draws.iters() < 4 {
        warnings.push("fewer than 4 draws per chain; diagnostics are undefined".into());
        return Diagnostics {
            rhat: vec![f64::NAN; dim],
            ess_bulk: vec![f64::NAN; dim],
            divergence_count,
            warnings,
        };
    }
    let single_chain = draws.chains() < 2;
    if single_chain {
        warnings.push("split-Rhat requires at least two chains; reported as NaN".into());
    }
    let mut rhat = Vec::with_capacity(dim);
    let mut ess_bulk = Vec::with_capacity(dim);
    for param in 0..dim {
        let seqs = split_sequences(draws, param);
        let pooled: Vec<f64> = seqs.iter().flatten().copied().collect();
        let constant = pooled.iter().all(|v| *v == pooled[0]);
        if constant {
            warnings.push(format!(
                "parameter {} is constant across all draws; diagnostics are undefined",
                draws.names()[param]
            ));
            rhat.push(f64::NAN);
            ess_bulk.push(f64::NAN);
            continue;
        }
        rhat.push(if single_chain { f64::NAN } else { rhat_of(&seqs) });
        let z = rank_normalize(&pooled);
        let half = seqs[0].len();
        let z_seqs: Vec<Vec<f64>> = z.chunks_exact(half).map(|c| c.to_vec()).collect();
        ess_bulk.push(ess_of(&z_seqs));
    }
    Diagnostics {
        rhat,
        ess_bulk,
        divergence_count,
        warnings,
    }
}
