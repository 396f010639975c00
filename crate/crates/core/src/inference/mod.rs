//! Gradient-based MCMC over any unconstrained density, plus convergence
//! diagnostics. The sampler is dynamic Hamiltonian Monte Carlo: multinomial
//! sampling along doubling trajectories with a no-U-turn stopping rule,
//! dual-averaging step-size adaptation, and a diagonal mass matrix estimated in
//! expanding warmup windows.

mod diagnostics;
mod nuts;

pub use diagnostics::{diagnose, Diagnostics};
pub use nuts::{hamiltonian_drift, sample, warmup_windows};

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An unconstrained log-density with gradient, evaluated concurrently by chains.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` (length `dim`) and returns the
    /// log-density. States outside the support must return -inf with a zero
    /// gradient rather than panic.
    fn log_density_and_grad(&self, u: &[f64], grad: &mut [f64]) -> f64;

    /// Column names for recorded draws.
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    /// Map one unconstrained state to the values recorded in draws.
    fn constrain(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("numerical failure during sampling: {0}")]
    Numerical(String),
    #[error("draws file {path}: {msg}")]
    DrawsFile { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_iters: 1000,
            sampling_iters: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 {
            return Err(SamplerError::Config("chains must be positive".into()));
        }
        if self.warmup_iters == 0 {
            return Err(SamplerError::Config("warmup_iters must be positive".into()));
        }
        if self.sampling_iters == 0 {
            return Err(SamplerError::Config(
                "sampling_iters must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!(
                "target_accept = {} must lie strictly inside (0, 1)",
                self.target_accept
            )));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 20 {
            return Err(SamplerError::Config(format!(
                "max_tree_depth = {} must lie in 1..=20",
                self.max_tree_depth
            )));
        }
        Ok(())
    }
}

/// Constrained posterior draws, chain-major. `draws` is flattened
/// [chain][iteration][parameter].
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    names: Vec<String>,
    chains: usize,
    iters: usize,
    dim: usize,
    draws: Vec<f64>,
    divergence_flags: Vec<Vec<bool>>,
    step_size: Vec<f64>,
    accept_mean: Vec<f64>,
}

impl PosteriorDraws {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        names: Vec<String>,
        chains: usize,
        iters: usize,
        draws: Vec<f64>,
        divergence_flags: Vec<Vec<bool>>,
        step_size: Vec<f64>,
        accept_mean: Vec<f64>,
    ) -> Result<Self, SamplerError> {
        let dim = names.len();
        if draws.len() != chains * iters * dim {
            return Err(SamplerError::Numerical(format!(
                "draw storage of length {} does not match {chains} chains x {iters} iterations x {dim} parameters",
                draws.len()
            )));
        }
        if divergence_flags.len() != chains
            || divergence_flags.iter().any(|c| c.len() != iters)
        {
            return Err(SamplerError::Numerical(
                "divergence flags do not match the draw shape".into(),
            ));
        }
        if step_size.len() != chains || accept_mean.len() != chains {
            return Err(SamplerError::Numerical(
                "per-chain statistics do not match the chain count".into(),
            ));
        }
        Ok(Self {
            names,
            chains,
            iters,
            dim,
            draws,
            divergence_flags,
            step_size,
            accept_mean,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn chains(&self) -> usize {
        self.chains
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_draws(&self) -> usize {
        self.chains * self.iters
    }

    pub fn step_size(&self) -> &[f64] {
        &self.step_size
    }

    pub fn accept_mean(&self) -> &[f64] {
        &self.accept_mean
    }

    pub fn divergence_flags(&self) -> &[Vec<bool>] {
        &self.divergence_flags
    }

    pub fn divergence_count(&self) -> usize {
        self.divergence_flags
            .iter()
            .map(|c| c.iter().filter(|d| **d).count())
            .sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, chain: usize, iter: usize) -> &[f64] {
        let start = (chain * self.iters + iter) * self.dim;
        &self.draws[start..start + self.dim]
    }

    pub fn value(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.draws[(chain * self.iters + iter) * self.dim + param]
    }

    /// Row by flat index over chains x iterations (chain-major).
    pub fn flat_row(&self, idx: usize) -> &[f64] {
        &self.draws[idx * self.dim..(idx + 1) * self.dim]
    }

    /// All rows in chain-major, iteration order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim)
    }

    pub fn chain_column(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.iters)
            .map(|it| self.value(chain, it, param))
            .collect()
    }

    pub fn pooled_column(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_draws());
        for chain in 0..self.chains {
            for it in 0..self.iters {
                out.push(self.value(chain, it, param));
            }
        }
        out
    }

    /// CSV with columns chain, iteration, then one column per parameter.
    pub fn save_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let mut out = String::new();
        out.push_str("chain,iteration");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for chain in 0..self.chains {
            for it in 0..self.iters {
                let _ = write!(out, "{chain},{it}");
                for v in self.row(chain, it) {
                    let _ = write!(out, ",{v:.16e}");
                }
                out.push('\n');
            }
        }
        std::fs::write(path, out).map_err(|source| SamplerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reload draws written by `save_csv`. Per-chain step sizes, acceptance
    /// statistics, and divergence flags are not part of the CSV and come back
    /// empty (NaN / false).
    pub fn load_csv(path: &Path) -> Result<Self, SamplerError> {
        let text = std::fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let fail = |msg: String| SamplerError::DrawsFile {
            path: path.display().to_string(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fail("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "chain" || cols[1] != "iteration" {
            return Err(fail(
                "header must start with chain,iteration followed by parameter names".into(),
            ));
        }
        let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        let dim = names.len();
        let mut records: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let mut max_chain = 0usize;
        let mut max_iter = 0usize;
        for (lineno, line) in lines.enumerate() {
            let lineno = lineno + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(fail(format!(
                    "line {lineno}: expected {} fields, found {}",
                    dim + 2,
                    fields.len()
                )));
            }
            let chain: usize = fields[0]
                .parse()
                .map_err(|_| fail(format!("line {lineno}: bad chain index {:?}", fields[0])))?;
            let iter: usize = fields[1]
                .parse()
                .map_err(|_| fail(format!("line {lineno}: bad iteration index {:?}", fields[1])))?;
            let mut row = Vec::with_capacity(dim);
            for f in &fields[2..] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| fail(format!("line {lineno}: bad value {f:?}")))?;
                row.push(v);
            }
            max_chain = max_chain.max(chain);
            max_iter = max_iter.max(iter);
            records.push((chain, iter, row));
        }
        if records.is_empty() {
            return Err(fail("no draws".into()));
        }
        let chains = max_chain + 1;
        let iters = max_iter + 1;
        let mut draws = vec![f64::NAN; chains * iters * dim];
        let mut seen = vec![false; chains * iters];
        for (chain, iter, row) in records {
            let slot = chain * iters + iter;
            if seen[slot] {
                return Err(fail(format!("duplicate draw for chain {chain}, iteration {iter}")));
            }
            seen[slot] = true;
            draws[slot * dim..(slot + 1) * dim].copy_from_slice(&row);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(fail(format!(
                "missing draw for chain {}, iteration {}",
                missing / iters,
                missing % iters
            )));
        }
        Self::from_parts(
            names,
            chains,
            iters,
            draws,
            vec![vec![false; iters]; chains],
            vec![f64::NAN; chains],
            vec![f64::NAN; chains],
        )
    }
}

/// Uniform draw from [-2, 2] per coordinate, redrawn until the density and
/// gradient are finite (up to 100 attempts).
pub fn initialize<T: Target>(target: &T, rng: &mut impl Rng) -> Result<Vec<f64>, SamplerError> {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    let mut first_failure: Option<f64> = None;
    for _ in 0..100 {
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lp = target.log_density_and_grad(&u, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(u);
        }
        first_failure.get_or_insert(lp);
    }
    Err(SamplerError::Init(format!(
        "100 attempts produced no finite starting state; the first attempt scored log-density {}",
        first_failure.unwrap_or(f64::NAN)
    )))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decorrelated child seed for stream `stream` of a master seed. Used for chain
/// seeding and for deriving independent per-task or per-repeat seeds.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
