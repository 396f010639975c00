use plategp::datagen::{
    denormalise, load_dataset, normalise, save_dataset, simulate_population, split, DataError,
    PlateConfig, TaskDataset,
};
use plategp::model::sensor_separation;

/// Small two-sensor plate with hand-picked source locations and (near) zero
/// noise, so raw outputs are checkable against straight-line geometry.
fn two_sensor_plate() -> PlateConfig {
    PlateConfig {
        length: 2.0,
        width: 1.0,
        sensor_positions: vec![[0.5, 0.0], [1.5, 0.0]],
        source_grid: vec![
            [0.0, 0.0],
            [2.0, 0.0],
            [1.0, 0.3],
            [1.0, 0.9],
            [0.7, 0.4],
            [1.2, 0.8],
        ],
        wave_speed: 0.5,
        noise_base: 1e-12,
        noise_edge_gain: 0.0,
        seed: 5,
    }
}

fn noiseless_output(config: &PlateConfig, pair: (usize, usize), x: [f64; 2]) -> f64 {
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let sa = config.sensor_positions[pair.0];
    let sb = config.sensor_positions[pair.1];
    (d(x, sa) - d(x, sb)) / config.wave_speed
}

#[test]
fn default_population_structure() {
    let config = PlateConfig::default_plate(3);
    let (population, record) = simulate_population(&config).unwrap();
    assert_eq!(population.len(), 28);
    assert_eq!(record.input_scale, 200.0);

    let mut seen = std::collections::HashSet::new();
    for task in &population {
        let (j, jp) = task.pair_id;
        assert!(j < jp && jp < 8, "bad pair {:?}", task.pair_id);
        assert!(seen.insert(task.pair_id));
        let expected = sensor_separation(
            config.sensor_positions[j],
            config.sensor_positions[jp],
        ) / 200.0;
        assert!((task.separation - expected).abs() < 1e-12);
        assert_eq!(task.inputs.len(), 52 * 39);
        for p in &task.inputs {
            assert!(p[0] >= 0.0 && p[0] <= 1.0);
            assert!(p[1] >= 0.0 && p[1] <= 0.75 + 1e-12);
        }
        assert!(task.split_mask.iter().all(|m| *m));
    }
}

#[test]
fn equidistant_source_gives_zero_output() {
    let config = two_sensor_plate();
    let (population, record) = simulate_population(&config).unwrap();
    let raw = denormalise(&population, &record);
    let task = &raw[0];
    // Sources on the perpendicular bisector x = 1.0 hit both sensors at the
    // same time.
    for (x, y) in task.inputs.iter().zip(&task.outputs) {
        if (x[0] - 1.0).abs() < 1e-12 {
            assert!(y.abs() < 1e-9, "output {y} at {x:?}");
        }
    }
}

#[test]
fn collinear_source_attains_separation_over_wave_speed() {
    let config = two_sensor_plate();
    let sep = 1.0;
    let (population, record) = simulate_population(&config).unwrap();
    let raw = denormalise(&population, &record);
    let task = &raw[0];
    let bound = sep / config.wave_speed;
    let mut attained = 0;
    for (x, y) in task.inputs.iter().zip(&task.outputs) {
        assert!(y.abs() <= bound + 1e-9);
        // (0,0) lies beyond sensor 0 on the pair axis, (2,0) beyond sensor 1.
        if x[1] == 0.0 && (x[0] == 0.0 || x[0] == 2.0) {
            assert!((y.abs() - bound).abs() < 1e-9, "output {y} at {x:?}");
            attained += 1;
        }
    }
    assert_eq!(attained, 2);
}

#[test]
fn max_output_hits_separation_bound_on_all_pairs() {
    let mut config = PlateConfig::default_plate(7);
    config.noise_base = 1e-12;
    config.noise_edge_gain = 0.0;
    let (population, record) = simulate_population(&config).unwrap();
    let raw = denormalise(&population, &record);
    assert_eq!(raw.len(), 28);
    for task in &raw {
        let sep = sensor_separation(
            config.sensor_positions[task.pair_id.0],
            config.sensor_positions[task.pair_id.1],
        );
        let bound = sep / config.wave_speed;
        let max_abs = task
            .outputs
            .iter()
            .fold(0.0_f64, |acc, y| acc.max(y.abs()));
        // Sensors sit on source-grid nodes, so the bound is attained exactly
        // (up to the vanishing noise term).
        assert!(
            (max_abs - bound).abs() < 1e-6,
            "pair {:?}: max {max_abs} vs bound {bound}",
            task.pair_id
        );
        for y in &task.outputs {
            assert!(y.abs() <= bound + 1e-6);
        }
    }
}

#[test]
fn residual_noise_grows_toward_plate_edges() {
    let config = PlateConfig::default_plate(11);
    let (population, record) = simulate_population(&config).unwrap();
    let raw = denormalise(&population, &record);

    // Pool residuals over all pairs, banded by source distance from the plate
    // center; the noise law scales with distance from each pair's centroid,
    // and pair centroids cluster near the middle of the plate.
    let center = [config.length / 2.0, config.width / 2.0];
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut tagged: Vec<(f64, f64)> = Vec::new();
    for task in &raw {
        for (x, y) in task.inputs.iter().zip(&task.outputs) {
            let resid = y - noiseless_output(&config, task.pair_id, *x);
            tagged.push((d(*x, center), resid));
        }
    }
    assert!(tagged.len() >= 10_000);
    tagged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let band = tagged.len() / 10;
    let std_of = |slice: &[(f64, f64)]| {
        let m = slice.iter().map(|t| t.1).sum::<f64>() / slice.len() as f64;
        (slice.iter().map(|t| (t.1 - m).powi(2)).sum::<f64>() / slice.len() as f64).sqrt()
    };
    let central = std_of(&tagged[..band]);
    let outer = std_of(&tagged[tagged.len() - band..]);
    assert!(
        outer > central,
        "outer band std {outer} vs central {central}"
    );
}

#[test]
fn pooled_normalisation_moments() {
    let config = PlateConfig::default_plate(13);
    let (population, _) = simulate_population(&config).unwrap();
    let all: Vec<f64> = population
        .iter()
        .flat_map(|t| t.outputs.iter().copied())
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-12, "pooled mean {mean}");
    assert!((std - 1.0).abs() < 1e-12, "pooled std {std}");

    // Global (not per-task) z-scoring: per-pair means keep their structure.
    let nonzero_means = population
        .iter()
        .filter(|t| {
            let m = t.outputs.iter().sum::<f64>() / t.outputs.len() as f64;
            m.abs() > 1e-3
        })
        .count();
    assert!(nonzero_means >= 20, "only {nonzero_means} pairs off-center");
}

#[test]
fn normalisation_scales_inputs_by_longest_edge() {
    let raw = vec![TaskDataset {
        pair_id: (0, 1),
        separation: 1.2,
        inputs: vec![[1.0, 0.5], [2.0, 1.0]],
        outputs: vec![1.0, 3.0],
        split_mask: vec![true, true],
    }];
    let (norm, record) = normalise(&raw, 2.0).unwrap();
    assert_eq!(norm[0].inputs[0], [0.5, 0.25]);
    assert_eq!(norm[0].inputs[1], [1.0, 0.5]);
    assert!((norm[0].separation - 0.6).abs() < 1e-15);
    // Outputs 1, 3: pooled mean 2, population std 1.
    assert!((norm[0].outputs[0] + 1.0).abs() < 1e-15);
    assert!((norm[0].outputs[1] - 1.0).abs() < 1e-15);
    assert_eq!(record.output_mean, 2.0);
    assert_eq!(record.output_std, 1.0);
    assert_eq!(record.input_scale, 2.0);
}

#[test]
fn normalise_denormalise_round_trip() {
    let raw = vec![
        TaskDataset {
            pair_id: (0, 2),
            separation: 3.3,
            inputs: vec![[0.3, 7.1], [5.5, 2.2], [1.9, 0.4]],
            outputs: vec![-2.5, 0.7, 4.1],
            split_mask: vec![true, false, true],
        },
        TaskDataset {
            pair_id: (1, 2),
            separation: 0.9,
            inputs: vec![[6.0, 1.0], [2.4, 3.8]],
            outputs: vec![1.3, -0.2],
            split_mask: vec![false, true],
        },
    ];
    let (norm, record) = normalise(&raw, 3.7).unwrap();
    let back = denormalise(&norm, &record);
    for (a, b) in raw.iter().zip(&back) {
        assert_eq!(a.pair_id, b.pair_id);
        assert_eq!(a.split_mask, b.split_mask);
        assert!((a.separation - b.separation).abs() < 1e-12);
        for (pa, pb) in a.inputs.iter().zip(&b.inputs) {
            assert!((pa[0] - pb[0]).abs() < 1e-12);
            assert!((pa[1] - pb[1]).abs() < 1e-12);
        }
        for (ya, yb) in a.outputs.iter().zip(&b.outputs) {
            assert!((ya - yb).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_normalisation_rejected() {
    let flat = vec![TaskDataset {
        pair_id: (0, 1),
        separation: 1.0,
        inputs: vec![[0.0, 0.0], [1.0, 1.0]],
        outputs: vec![2.0, 2.0],
        split_mask: vec![true, true],
    }];
    assert!(matches!(normalise(&flat, 1.0), Err(DataError::Domain(_))));
    assert!(matches!(normalise(&flat, 0.0), Err(DataError::Domain(_))));
    assert!(matches!(normalise(&[], 1.0), Err(DataError::Domain(_))));
}

#[test]
fn config_validation_errors() {
    let mut one_sensor = two_sensor_plate();
    one_sensor.sensor_positions.truncate(1);
    let err = simulate_population(&one_sensor).unwrap_err();
    assert!(err.to_string().contains("2 sensors"), "{err}");

    let mut bad_speed = two_sensor_plate();
    bad_speed.wave_speed = 0.0;
    assert!(matches!(
        simulate_population(&bad_speed),
        Err(DataError::Config(_))
    ));

    let mut outside = two_sensor_plate();
    outside.sensor_positions[1] = [3.0, 0.0];
    assert!(matches!(
        simulate_population(&outside),
        Err(DataError::Config(_))
    ));

    let mut no_sources = two_sensor_plate();
    no_sources.source_grid.clear();
    assert!(matches!(
        simulate_population(&no_sources),
        Err(DataError::Config(_))
    ));
}

fn synthetic_task(n: usize) -> TaskDataset {
    TaskDataset {
        pair_id: (2, 5),
        separation: 0.4,
        inputs: (0..n).map(|i| [i as f64 * 1e-3, 0.1]).collect(),
        outputs: (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
        split_mask: vec![true; n],
    }
}

#[test]
fn split_sizes_and_determinism() {
    let task = synthetic_task(2227);
    let split_a = split(&task, 100, 21).unwrap();
    assert_eq!(split_a.n_train(), 100);
    assert_eq!(split_a.n_test(), 2127);
    // Points are untouched; only the mask changes.
    assert_eq!(split_a.inputs, task.inputs);
    assert_eq!(split_a.outputs, task.outputs);

    let split_b = split(&task, 100, 21).unwrap();
    assert_eq!(split_a.split_mask, split_b.split_mask);
    let split_c = split(&task, 100, 22).unwrap();
    assert_ne!(split_a.split_mask, split_c.split_mask);

    let all = split(&task, 2227, 21).unwrap();
    assert_eq!(all.n_test(), 0);

    assert!(matches!(
        split(&task, 2228, 21),
        Err(DataError::Domain(_))
    ));
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("population.csv");
    let meta = dir.path().join("metadata.json");
    let config = PlateConfig::default_plate(17);
    let (mut population, record) = simulate_population(&config).unwrap();
    // Give the masks some structure so the split column is exercised.
    for (i, task) in population.iter_mut().enumerate() {
        let n = task.len();
        *task = split(task, 50 + i, 100 + i as u64).unwrap();
        assert_eq!(task.len(), n);
    }
    save_dataset(&population, &config, &record, &csv, &meta).unwrap();
    let (loaded, loaded_config, loaded_record) = load_dataset(&csv, &meta).unwrap();
    assert_eq!(population, loaded);
    assert_eq!(config, loaded_config);
    assert_eq!(record, loaded_record);

    // Byte determinism of the writer.
    let csv2 = dir.path().join("population2.csv");
    let meta2 = dir.path().join("metadata2.json");
    save_dataset(&population, &config, &record, &csv2, &meta2).unwrap();
    assert_eq!(
        std::fs::read(&csv).unwrap(),
        std::fs::read(&csv2).unwrap()
    );
    assert_eq!(
        std::fs::read(&meta).unwrap(),
        std::fs::read(&meta2).unwrap()
    );
}

#[test]
fn load_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("population.csv");
    let meta = dir.path().join("metadata.json");
    let config = two_sensor_plate();
    let (population, record) = simulate_population(&config).unwrap();
    save_dataset(&population, &config, &record, &csv, &meta).unwrap();
    let good = std::fs::read_to_string(&csv).unwrap();
    let bad = dir.path().join("bad.csv");

    // Missing column.
    let mut lines: Vec<&str> = good.lines().collect();
    let no_split_header = "pair_id,sep,x1,x2,y";
    let mut text = vec![no_split_header];
    text.extend(lines.iter().skip(1).copied());
    std::fs::write(&bad, text.join("\n")).unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    assert!(err.to_string().contains("missing column split"), "{err}");

    // Shuffled column order.
    let reordered = "sep,pair_id,x1,x2,y,split";
    let mut text = vec![reordered];
    text.extend(lines.iter().skip(1).copied());
    std::fs::write(&bad, text.join("\n")).unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    assert!(err.to_string().contains("column order"), "{err}");

    // Empty file.
    std::fs::write(&bad, "").unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    assert!(err.to_string().contains("empty file"), "{err}");

    // Header only.
    std::fs::write(&bad, format!("{}\n", lines[0])).unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    assert!(err.to_string().contains("no data rows"), "{err}");

    // Truncated row: drop the last field of data line 3 (file line 4).
    let broken: String = lines[3].rsplit_once(',').unwrap().0.to_string();
    lines[3] = &broken;
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    match err {
        DataError::Parse { line, ref msg, .. } => {
            assert_eq!(line, 4);
            assert!(msg.contains("expected 6 fields"), "{msg}");
        }
        other => panic!("unexpected error {other}"),
    }

    // Unparseable number.
    let mut lines: Vec<String> = good.lines().map(str::to_string).collect();
    lines[2] = lines[2].replacen("e0,", "junk,", 1);
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let err = load_dataset(&bad, &meta).unwrap_err();
    assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
}
