//! Run configuration: a single versioned TOML file with one section per
//! pipeline stage. Parsing is strict (unknown keys rejected); every command
//! echoes the fully resolved config next to its outputs, and that dump parses
//! back to the same run.

use std::path::{Path, PathBuf};

use plategp::datagen::PlateConfig;
use plategp::inference::SamplerConfig;
use plategp::model::{PriorConstants, Regime};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default)]
    pub plate: PlateSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Plate geometry and noise law. `sensors` defaults to the stock eight-sensor
/// layout of the 200 x 150 plate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateSection {
    pub length: f64,
    pub width: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub wave_speed: f64,
    pub noise_base: f64,
    pub noise_edge_gain: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensors: Option<Vec<[f64; 2]>>,
}

impl Default for PlateSection {
    fn default() -> Self {
        Self {
            length: 200.0,
            width: 150.0,
            grid_nx: 52,
            grid_ny: 39,
            wave_speed: 1.0,
            noise_base: 1.5,
            noise_edge_gain: 0.01,
            seed: 0,
            sensors: None,
        }
    }
}

impl PlateSection {
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        if s.sensors.is_none() {
            s.sensors = Some(PlateConfig::default_plate(0).sensor_positions);
        }
        s
    }

    pub fn to_plate_config(&self) -> PlateConfig {
        let r = self.resolved();
        PlateConfig {
            length: r.length,
            width: r.width,
            sensor_positions: r.sensors.expect("resolved"),
            source_grid: PlateConfig::grid_points(r.grid_nx, r.grid_ny, r.length, r.width),
            wave_speed: r.wave_speed,
            noise_base: r.noise_base,
            noise_edge_gain: r.noise_edge_gain,
            seed: r.seed,
        }
    }
}

/// Regime selection, the training tasks it covers (pair labels like "0-1";
/// empty = every task that is not held out), the per-task training-split size
/// used at generation time, and the hyperprior constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub regime: Regime,
    pub tasks: Vec<String>,
    pub n_train: usize,
    pub priors: PriorConstants,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            regime: Regime::Stl,
            tasks: Vec::new(),
            n_train: 100,
            priors: PriorConstants::default(),
        }
    }
}

/// Scoring and transfer-experiment knobs. `methods` defaults to the configured
/// regime alone; `holdouts` are excluded from every fit and scored only by the
/// transfer command; `seed` drives subset resampling and refits there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<String>,
    pub max_samples: usize,
    pub budgets: Vec<usize>,
    pub repeats: usize,
    pub holdouts: Vec<String>,
    pub predict_separations: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: Vec::new(),
            max_samples: 400,
            budgets: vec![5, 10],
            repeats: 10,
            holdouts: Vec::new(),
            predict_separations: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (this binary reads version {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--seed` replaces every seed in the file (plate, sampler, eval);
    /// `--out` replaces the output directory.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.plate.seed = s;
            self.sampler.seed = s;
            self.eval.seed = s;
        }
        if let Some(dir) = out {
            self.io.out_dir = dir;
        }
    }

    /// Fully concrete copy: optional fields resolved, defaulted lists filled.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.plate = self.plate.resolved();
        if cfg.eval.methods.is_empty() {
            cfg.eval.methods = vec![self.model.regime.to_string()];
        }
        cfg
    }

    pub fn dump_effective(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("config serialization failed: {e}")))?;
        let path = out_dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.model.n_train == 0 {
            return Err(CliError::Config(
                "model.n_train must be at least 1".into(),
            ));
        }
        for m in &self.eval.methods {
            parse_regime(m)?;
        }
        for label in self.model.tasks.iter().chain(&self.eval.holdouts) {
            parse_pair(label)?;
        }
        for sep in &self.eval.predict_separations {
            if !sep.is_finite() || *sep < 0.0 {
                return Err(CliError::Config(format!(
                    "eval.predict_separations entry {sep} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Regime>, CliError> {
        let mut out = Vec::with_capacity(self.eval.methods.len());
        for m in &self.eval.methods {
            let r = parse_regime(m)?;
            if out.contains(&r) {
                return Err(CliError::Config(format!("method {m} listed twice")));
            }
            out.push(r);
        }
        Ok(out)
    }
}

pub fn parse_regime(s: &str) -> Result<Regime, CliError> {
    match s {
        "stl" => Ok(Regime::Stl),
        "mtl_a" => Ok(Regime::MtlA),
        "mtl_b" => Ok(Regime::MtlB),
        other => Err(CliError::Config(format!(
            "unknown method {other:?} (expected stl, mtl_a, or mtl_b)"
        ))),
    }
}

pub fn parse_pair(label: &str) -> Result<(usize, usize), CliError> {
    let err = || {
        CliError::Config(format!(
            "bad pair label {label:?} (expected \"j-jp\" with j < jp)"
        ))
    };
    let (a, b) = label.split_once('-').ok_or_else(err)?;
    let j: usize = a.parse().map_err(|_| err())?;
    let jp: usize = b.parse().map_err(|_| err())?;
    if j >= jp {
        return Err(err());
    }
    Ok((j, jp))
}
