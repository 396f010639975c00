//! Synthetic plate ΔToA simulator and dataset management. Straight-line,
//! constant-speed propagation on a rectangular plate: for source x and sensor s the
//! arrival time is |x - s| / wave_speed, and a pair's output is the difference of
//! its two arrival times plus heteroscedastic noise that grows away from the pair
//! centroid. This deliberately builds in a process amplitude that grows with sensor
//! separation (max noiseless |output| for a pair is exactly separation / wave_speed).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::sensor_separation;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid plate configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
}

/// Plate geometry, sensor layout, source candidates, wave speed, and the noise law
/// std = noise_base * (1 + noise_edge_gain * dist(source, pair centroid)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateConfig {
    pub length: f64,
    pub width: f64,
    pub sensor_positions: Vec<[f64; 2]>,
    pub source_grid: Vec<[f64; 2]>,
    pub wave_speed: f64,
    pub noise_base: f64,
    pub noise_edge_gain: f64,
    pub seed: u64,
}

impl PlateConfig {
    /// Regular nx-by-ny grid of source candidates spanning the plate.
    pub fn grid_points(nx: usize, ny: usize, length: f64, width: f64) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = if nx > 1 { length * i as f64 / (nx - 1) as f64 } else { 0.0 };
                let y = if ny > 1 { width * j as f64 / (ny - 1) as f64 } else { 0.0 };
                pts.push([x, y]);
            }
        }
        pts
    }

    /// Default 200 x 150 plate, 52 x 39 source grid, eight sensors placed on grid
    /// nodes (so the maximal noiseless output of every pair is attained exactly at
    /// some source candidate).
    pub fn default_plate(seed: u64) -> Self {
        let (length, width) = (200.0, 150.0);
        let (nx, ny) = (52usize, 39usize);
        let node = |i: usize, j: usize| -> [f64; 2] {
            [
                length * i as f64 / (nx - 1) as f64,
                width * j as f64 / (ny - 1) as f64,
            ]
        };
        let sensor_positions = vec![
            node(4, 4),
            node(26, 6),
            node(47, 4),
            node(6, 20),
            node(45, 17),
            node(4, 34),
            node(24, 32),
            node(47, 35),
        ];
        Self {
            length,
            width,
            sensor_positions,
            source_grid: Self::grid_points(nx, ny, length, width),
            wave_speed: 1.0,
            noise_base: 1.5,
            noise_edge_gain: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.length > 0.0 && self.width > 0.0 && self.length >= self.width) {
            return Err(DataError::Config(format!(
                "plate must satisfy length >= width > 0, got {} x {}",
                self.length, self.width
            )));
        }
        if self.sensor_positions.len() < 2 {
            return Err(DataError::Config(format!(
                "at least 2 sensors required, got {}",
                self.sensor_positions.len()
            )));
        }
        if !(self.wave_speed > 0.0) {
            return Err(DataError::Config(format!(
                "wave_speed must be positive, got {}",
                self.wave_speed
            )));
        }
        if !(self.noise_base > 0.0) || !(self.noise_edge_gain >= 0.0) {
            return Err(DataError::Config(format!(
                "need noise_base > 0 and noise_edge_gain >= 0, got {} / {}",
                self.noise_base, self.noise_edge_gain
            )));
        }
        if self.source_grid.is_empty() {
            return Err(DataError::Config("source grid is empty".into()));
        }
        let inside = |p: &[f64; 2]| {
            p[0] >= 0.0 && p[0] <= self.length && p[1] >= 0.0 && p[1] <= self.width
        };
        if let Some(p) = self.sensor_positions.iter().find(|p| !inside(p)) {
            return Err(DataError::Config(format!(
                "sensor ({}, {}) lies outside the plate",
                p[0], p[1]
            )));
        }
        if let Some(p) = self.source_grid.iter().find(|p| !inside(p)) {
            return Err(DataError::Config(format!(
                "source ({}, {}) lies outside the plate",
                p[0], p[1]
            )));
        }
        Ok(())
    }
}

/// One sensor pair's experiment: normalised 2-D source locations, normalised
/// outputs, the pair's sensor separation (normalised units), and a train/test mask
/// (true = train).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub pair_id: (usize, usize),
    pub separation: f64,
    pub inputs: Vec<[f64; 2]>,
    pub outputs: Vec<f64>,
    pub split_mask: Vec<bool>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_train(&self) -> usize {
        self.split_mask.iter().filter(|m| **m).count()
    }

    pub fn n_test(&self) -> usize {
        self.len() - self.n_train()
    }

    pub fn train_inputs(&self) -> Vec<[f64; 2]> {
        self.select_inputs(true)
    }

    pub fn test_inputs(&self) -> Vec<[f64; 2]> {
        self.select_inputs(false)
    }

    pub fn train_outputs(&self) -> Vec<f64> {
        self.select_outputs(true)
    }

    pub fn test_outputs(&self) -> Vec<f64> {
        self.select_outputs(false)
    }

    fn select_inputs(&self, train: bool) -> Vec<[f64; 2]> {
        self.inputs
            .iter()
            .zip(&self.split_mask)
            .filter(|(_, m)| **m == train)
            .map(|(x, _)| *x)
            .collect()
    }

    fn select_outputs(&self, train: bool) -> Vec<f64> {
        self.outputs
            .iter()
            .zip(&self.split_mask)
            .filter(|(_, m)| **m == train)
            .map(|(y, _)| *y)
            .collect()
    }

    pub fn pair_label(&self) -> String {
        format!("{}-{}", self.pair_id.0, self.pair_id.1)
    }
}

/// Input scale (longest plate edge) and the global pooled output moments used for
/// z-scoring. Applying then inverting is the identity to 1e-12.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalisationRecord {
    pub input_scale: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

/// Generate all C(n_sensors, 2) pairwise experiments over the source grid, then
/// apply the global normalisation (inputs by longest edge, outputs z-scored with
/// moments pooled over every pair).
pub fn simulate_population(
    config: &PlateConfig,
) -> Result<(Vec<TaskDataset>, NormalisationRecord), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sensors = &config.sensor_positions;
    let mut raw = Vec::new();
    for j in 0..sensors.len() {
        for jp in (j + 1)..sensors.len() {
            let (sa, sb) = (sensors[j], sensors[jp]);
            let centroid = [(sa[0] + sb[0]) / 2.0, (sa[1] + sb[1]) / 2.0];
            let mut outputs = Vec::with_capacity(config.source_grid.len());
            for x in &config.source_grid {
                let arrival_a = dist2(*x, sa) / config.wave_speed;
                let arrival_b = dist2(*x, sb) / config.wave_speed;
                let sd = config.noise_base
                    * (1.0 + config.noise_edge_gain * dist2(*x, centroid));
                let eps: f64 = rng.sample(StandardNormal);
                outputs.push(arrival_a - arrival_b + sd * eps);
            }
            raw.push(TaskDataset {
                pair_id: (j, jp),
                separation: sensor_separation(sa, sb),
                inputs: config.source_grid.clone(),
                outputs,
                split_mask: vec![true; config.source_grid.len()],
            });
        }
    }
    normalise(&raw, config.length.max(config.width))
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Divide inputs and separations by the longest edge and z-score the outputs with
/// moments pooled over ALL tasks (per-task means generally stay nonzero, which is
/// the point: cross-task amplitude structure survives).
pub fn normalise(
    population: &[TaskDataset],
    input_scale: f64,
) -> Result<(Vec<TaskDataset>, NormalisationRecord), DataError> {
    if !(input_scale > 0.0) {
        return Err(DataError::Domain(format!(
            "input scale must be positive, got {input_scale}"
        )));
    }
    let n_total: usize = population.iter().map(|t| t.outputs.len()).sum();
    if n_total == 0 {
        return Err(DataError::Domain("empty population".into()));
    }
    let mean = population
        .iter()
        .flat_map(|t| t.outputs.iter())
        .sum::<f64>()
        / n_total as f64;
    let ss = population
        .iter()
        .flat_map(|t| t.outputs.iter())
        .map(|y| (y - mean) * (y - mean))
        .sum::<f64>();
    let std = (ss / n_total as f64).sqrt();
    if !(std > 0.0) {
        return Err(DataError::Domain(
            "pooled output variance is zero; cannot z-score".into(),
        ));
    }
    let record = NormalisationRecord {
        input_scale,
        output_mean: mean,
        output_std: std,
    };
    let normalised = population
        .iter()
        .map(|t| TaskDataset {
            pair_id: t.pair_id,
            separation: t.separation / input_scale,
            inputs: t
                .inputs
                .iter()
                .map(|p| [p[0] / input_scale, p[1] / input_scale])
                .collect(),
            outputs: t.outputs.iter().map(|y| (y - mean) / std).collect(),
            split_mask: t.split_mask.clone(),
        })
        .collect();
    Ok((normalised, record))
}

/// Invert [`normalise`].
pub fn denormalise(population: &[TaskDataset], record: &NormalisationRecord) -> Vec<TaskDataset> {
    population
        .iter()
        .map(|t| TaskDataset {
            pair_id: t.pair_id,
            separation: t.separation * record.input_scale,
            inputs: t
                .inputs
                .iter()
                .map(|p| [p[0] * record.input_scale, p[1] * record.input_scale])
                .collect(),
            outputs: t
                .outputs
                .iter()
                .map(|y| y * record.output_std + record.output_mean)
                .collect(),
            split_mask: t.split_mask.clone(),
        })
        .collect()
}

/// Uniform train subset of size n_train without replacement, deterministic per seed.
pub fn split(dataset: &TaskDataset, n_train: usize, seed: u64) -> Result<TaskDataset, DataError> {
    let n = dataset.len();
    if n_train > n {
        return Err(DataError::Domain(format!(
            "n_train = {n_train} exceeds the {n} available points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, n, n_train);
    let mut mask = vec![false; n];
    for idx in chosen.iter() {
        mask[idx] = true;
    }
    Ok(TaskDataset {
        split_mask: mask,
        ..dataset.clone()
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    plate: PlateConfig,
    normalisation: NormalisationRecord,
}

/// Exact 17-significant-digit float formatting; round-trips every f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

const CSV_HEADER: [&str; 6] = ["pair_id", "sep", "x1", "x2", "y", "split"];

/// Write the population CSV (columns pair_id, sep, x1, x2, y, split) and the JSON
/// metadata file (plate config + normalisation record). Output is byte-deterministic.
pub fn save_dataset(
    population: &[TaskDataset],
    plate: &PlateConfig,
    record: &NormalisationRecord,
    csv_path: &Path,
    meta_path: &Path,
) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&CSV_HEADER.join(","));
    out.push('\n');
    for task in population {
        let label = task.pair_label();
        let sep = fmt_f64(task.separation);
        for ((x, y), m) in task
            .inputs
            .iter()
            .zip(&task.outputs)
            .zip(&task.split_mask)
        {
            let _ = writeln!(
                out,
                "{label},{sep},{},{},{},{}",
                fmt_f64(x[0]),
                fmt_f64(x[1]),
                fmt_f64(*y),
                if *m { "train" } else { "test" }
            );
        }
    }
    std::fs::write(csv_path, out).map_err(|e| DataError::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    let meta = DatasetMeta {
        plate: plate.clone(),
        normalisation: *record,
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    json.push('\n');
    std::fs::write(meta_path, json).map_err(|e| DataError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })
}

/// Load a population saved by [`save_dataset`]. Save-then-load is bit-exact.
pub fn load_dataset(
    csv_path: &Path,
    meta_path: &Path,
) -> Result<(Vec<TaskDataset>, PlateConfig, NormalisationRecord), DataError> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| DataError::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    let path = csv_path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        path: path.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    for want in CSV_HEADER {
        if !cols.contains(&want) {
            return Err(DataError::Parse {
                path: path.clone(),
                line: 1,
                msg: format!("missing column {want}"),
            });
        }
    }
    if cols != CSV_HEADER {
        return Err(DataError::Parse {
            path: path.clone(),
            line: 1,
            msg: format!("unexpected column order {cols:?}"),
        });
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut tasks: std::collections::HashMap<(usize, usize), TaskDataset> =
        std::collections::HashMap::new();
    let mut any_row = false;
    for (idx, line) in lines {
        let lineno = (idx + 1) as u64;
        if line.is_empty() {
            continue;
        }
        any_row = true;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DataError::Parse {
                path: path.clone(),
                line: lineno,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let pair_id = parse_pair(fields[0]).ok_or_else(|| DataError::Parse {
            path: path.clone(),
            line: lineno,
            msg: format!("bad pair_id {:?}", fields[0]),
        })?;
        let parse_num = |s: &str, what: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|_| DataError::Parse {
                path: path.clone(),
                line: lineno,
                msg: format!("bad {what} value {s:?}"),
            })
        };
        let sep = parse_num(fields[1], "sep")?;
        let x1 = parse_num(fields[2], "x1")?;
        let x2 = parse_num(fields[3], "x2")?;
        let y = parse_num(fields[4], "y")?;
        let is_train = match fields[5] {
            "train" => true,
            "test" => false,
            other => {
                return Err(DataError::Parse {
                    path: path.clone(),
                    line: lineno,
                    msg: format!("bad split value {other:?}"),
                })
            }
        };
        let task = tasks.entry(pair_id).or_insert_with(|| {
            order.push(pair_id);
            TaskDataset {
                pair_id,
                separation: sep,
                inputs: Vec::new(),
                outputs: Vec::new(),
                split_mask: Vec::new(),
            }
        });
        if task.separation != sep {
            return Err(DataError::Parse {
                path: path.clone(),
                line: lineno,
                msg: format!(
                    "separation {sep} disagrees with earlier value {} for pair {}-{}",
                    task.separation, pair_id.0, pair_id.1
                ),
            });
        }
        task.inputs.push([x1, x2]);
        task.outputs.push(y);
        task.split_mask.push(is_train);
    }
    if !any_row {
        return Err(DataError::Parse {
            path: path.clone(),
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let population: Vec<TaskDataset> = order
        .iter()
        .map(|id| tasks.remove(id).expect("grouped task"))
        .collect();

    let meta_text = std::fs::read_to_string(meta_path).map_err(|e| DataError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| DataError::Parse {
            path: meta_path.display().to_string(),
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
    Ok((population, meta.plate, meta.normalisation))
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('-')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}
