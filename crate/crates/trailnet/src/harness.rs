//! Experiment orchestration over the library modules: dataset generation,
//! the baseline→adapt training protocol, flight evaluation, and the λ
//! sweep. Every command writes its resolved configuration next to its
//! outputs, and identical configs rerun to byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{
    evaluate, train_adaptive, AdaptConfig, AdaptError, AdaptedLayer, TrainLogRow, TrainOutcome,
};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{capture_dataset, read_ftds, write_ftds, DataError, Dataset};
use crate::flight::{run_episode, EpisodeResult, FlightError, Pilot};
use crate::nn::{
    checkpoint::{read_ftnn, write_ftnn},
    init_params, ModelParams, NnError,
};
use crate::rng::StreamKey;
use crate::scene::{build_world, DomainSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Flight(#[from] FlightError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| HarnessError::Io { path: path.into(), source })
}

/// All datasets one seed of one experiment needs, generated in memory.
pub struct DomainData {
    /// Per-source labeled training splits, config order.
    pub source_train: Vec<Dataset>,
    /// Pooled validation split from all sources (model selection).
    pub source_val: Dataset,
    /// Full per-source datasets before the validation split (what `gen`
    /// exports).
    pub source_full: Vec<Dataset>,
    pub target_unlabeled: Dataset,
    pub target_test: Dataset,
}

fn capture_sized(
    cfg: &ExperimentConfig,
    spec: &DomainSpec,
    seed: u64,
    n: usize,
) -> Dataset {
    let per_frame = 3 * if cfg.augment_mirror { 2 } else { 1 };
    let denom = cfg.worlds_per_domain * per_frame;
    let mut opts = cfg.capture_options();
    opts.frames_per_world = n.div_ceil(denom);
    let mut ds = capture_dataset(spec, seed, &opts);
    ds.samples.truncate(n);
    ds
}

/// Capture seeds: one derivation chain per (run seed, role), so source,
/// unlabeled-target and test-target sets come from disjoint worlds.
fn capture_seed(run_seed: u64, role: &str, salt: u64) -> u64 {
    StreamKey::new(run_seed, role).derive(salt).u64_at(0)
}

pub fn generate_domain_data(cfg: &ExperimentConfig, seed: u64) -> Result<DomainData, HarnessError> {
    let mut source_train = Vec::with_capacity(cfg.sources.len());
    let mut source_full = Vec::with_capacity(cfg.sources.len());
    let mut vals: Vec<Dataset> = Vec::with_capacity(cfg.sources.len());
    for (i, spec) in cfg.sources.iter().enumerate() {
        let full = capture_sized(cfg, spec, capture_seed(seed, "dataset-source", i as u64), cfg.samples_per_source);
        let (train, val) = full.split(cfg.val_fraction, capture_seed(seed, "val-split", i as u64));
        source_full.push(full);
        source_train.push(train);
        vals.push(val);
    }
    let source_val = Dataset::merged(&vals.iter().collect::<Vec<_>>());
    let target_unlabeled = capture_sized(
        cfg,
        &cfg.target,
        capture_seed(seed, "dataset-target", 0),
        cfg.samples_target_unlabeled,
    );
    let target_test = capture_sized(
        cfg,
        &cfg.target,
        capture_seed(seed, "dataset-target", 1),
        cfg.samples_target_test,
    );
    Ok(DomainData { source_train, source_val, source_full, target_unlabeled, target_test })
}

/// λ=0 training from fresh initialization on the source domains.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    data: &DomainData,
    seed: u64,
) -> Result<TrainOutcome, HarnessError> {
    let init = init_params(seed, cfg.image_size)?;
    let sources: Vec<&Dataset> = data.source_train.iter().collect();
    let empty = Dataset::new(cfg.image_size, cfg.image_size, 3);
    let out = train_adaptive(
        &cfg.baseline_adapt_config(),
        &init,
        &sources,
        &empty,
        &data.source_val,
        StreamKey::new(seed, "phase-baseline").u64_at(0),
    )?;
    Ok(out)
}

/// Adaptation from a trained baseline, optionally overriding the
/// configured λ (the sweep command does).
pub fn run_adapt_phase(
    cfg: &ExperimentConfig,
    init: &ModelParams,
    data: &DomainData,
    seed: u64,
    lambda: f64,
) -> Result<TrainOutcome, HarnessError> {
    let adapt_cfg = AdaptConfig { lambda, ..cfg.adapt_config() };
    let sources: Vec<&Dataset> = data.source_train.iter().collect();
    let out = train_adaptive(
        &adapt_cfg,
        init,
        &sources,
        &data.target_unlabeled,
        &data.source_val,
        StreamKey::new(seed, "phase-adapt").u64_at(0),
    )?;
    Ok(out)
}

/// CSV text of a training log. The MMD column grid is fixed by the source
/// and adapted-layer counts; λ=0 logs carry zero columns of the same shape.
pub fn training_log_csv(n_sources: usize, layers: &[AdaptedLayer], log: &[TrainLogRow]) -> String {
    let mut out = String::from("iteration,lr,ce");
    for si in 0..n_sources {
        for l in layers {
            let _ = write!(out, ",mmd_src{si}_layer_{}", l.token());
        }
    }
    out.push_str(",total,val_accuracy\n");
    for row in log {
        let _ = write!(out, "{},{},{}", row.iteration, row.lr, row.ce);
        for src in &row.mmd {
            for v in src {
                let _ = write!(out, ",{v}");
            }
        }
        let _ = write!(out, ",{}", row.total);
        match row.val_accuracy {
            Some(v) => {
                let _ = writeln!(out, ",{v}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub task: String,
    pub seed: u64,
    pub lambda: f64,
    pub estimator: &'static str,
    pub sources: String,
    pub target: String,
    pub baseline_accuracy: f64,
    pub adapted_accuracy: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out =
        String::from("task,seed,lambda,estimator,sources,target,baseline_accuracy,adapted_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.task, r.seed, r.lambda, r.estimator, r.sources, r.target, r.baseline_accuracy, r.adapted_accuracy
        );
    }
    out
}

fn source_set_token(cfg: &ExperimentConfig) -> String {
    cfg.sources.iter().map(|s| s.token()).collect::<Vec<_>>().join("+")
}

fn resolve_seeds(cfg: &ExperimentConfig, only: Option<u64>) -> Vec<u64> {
    match only {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn write_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    write_file(&out.join("config.resolved.txt"), cfg.resolved_text().as_bytes())
}

pub fn baseline_checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("baseline_seed{seed}.ftnn"))
}

pub fn adapted_checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("adapted_seed{seed}.ftnn"))
}

fn write_checkpoint(
    path: &Path,
    params: &ModelParams,
    train_cfg: &AdaptConfig,
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    }
    write_ftnn(params, path)?;
    let sidecar = path.with_extension("config.txt");
    write_file(&sidecar, train_cfg.sidecar_text().as_bytes())
}

/// `gen`: one FTDS file per domain per seed, plus a manifest.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    write_resolved(cfg, out)?;
    let mut manifest = String::from("file,role,domain,seed,samples,width,height,channels\n");
    for &seed in &cfg.seeds {
        let data = generate_domain_data(cfg, seed)?;
        let mut entries: Vec<(String, String, String, &Dataset)> = Vec::new();
        for (i, (spec, ds)) in cfg.sources.iter().zip(&data.source_full).enumerate() {
            entries.push((
                format!("source{i}_{}_seed{seed}.ftds", spec.token()),
                format!("source{i}"),
                spec.token(),
                ds,
            ));
        }
        entries.push((
            format!("target_unlabeled_{}_seed{seed}.ftds", cfg.target.token()),
            "target_unlabeled".into(),
            cfg.target.token(),
            &data.target_unlabeled,
        ));
        entries.push((
            format!("target_test_{}_seed{seed}.ftds", cfg.target.token()),
            "target_test".into(),
            cfg.target.token(),
            &data.target_test,
        ));
        for (file, role, domain, ds) in entries {
            write_ftds(ds, &out.join(&file))?;
            let _ = writeln!(
                manifest,
                "{file},{role},{domain},{seed},{},{},{},{}",
                ds.len(),
                ds.width,
                ds.height,
                ds.channels
            );
        }
    }
    write_file(&out.join("manifest.csv"), manifest.as_bytes())
}

/// `train`: λ=0 baselines, one checkpoint + log per seed.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, only_seed: Option<u64>) -> Result<(), HarnessError> {
    write_resolved(cfg, out)?;
    for seed in resolve_seeds(cfg, only_seed) {
        let data = generate_domain_data(cfg, seed)?;
        let outcome = run_baseline(cfg, &data, seed)?;
        write_checkpoint(&baseline_checkpoint_path(out, seed), &outcome.params, &cfg.baseline_adapt_config())?;
        let log = training_log_csv(cfg.sources.len(), &cfg.adapted_layers, &outcome.log);
        write_file(&out.join(format!("baseline_log_seed{seed}.csv")), log.as_bytes())?;
    }
    Ok(())
}

/// `adapt`: resume each baseline with the configured λ; writes adapted
/// checkpoints, logs, and the metrics table (baseline vs adapted accuracy
/// on the held-out target test set).
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    out: &Path,
    only_seed: Option<u64>,
    checkpoint_override: Option<&Path>,
) -> Result<Vec<MetricsRow>, HarnessError> {
    write_resolved(cfg, out)?;
    let seeds = resolve_seeds(cfg, only_seed);
    if checkpoint_override.is_some() && seeds.len() != 1 {
        return Err(HarnessError::Usage(
            "--checkpoint needs a single seed (pass --seed)".into(),
        ));
    }
    let mut rows = Vec::new();
    for seed in seeds {
        let base_path = match checkpoint_override {
            Some(p) => p.to_path_buf(),
            None => baseline_checkpoint_path(out, seed),
        };
        if !base_path.exists() {
            return Err(HarnessError::Usage(format!(
                "missing baseline checkpoint {}; run `train` first",
                base_path.display()
            )));
        }
        let baseline = read_ftnn(&base_path)?;
        let data = generate_domain_data(cfg, seed)?;
        let outcome = run_adapt_phase(cfg, &baseline, &data, seed, cfg.lambda)?;
        write_checkpoint(&adapted_checkpoint_path(out, seed), &outcome.params, &cfg.adapt_config())?;
        let log = training_log_csv(cfg.sources.len(), &cfg.adapted_layers, &outcome.log);
        write_file(&out.join(format!("adapt_log_seed{seed}.csv")), log.as_bytes())?;

        let (base_acc, _) = evaluate(&baseline, &data.target_test);
        let (adapt_acc, _) = evaluate(&outcome.params, &data.target_test);
        rows.push(MetricsRow {
            task: cfg.task.clone(),
            seed,
            lambda: cfg.lambda,
            estimator: "unbiased",
            sources: source_set_token(cfg),
            target: cfg.target.token(),
            baseline_accuracy: base_acc,
            adapted_accuracy: adapt_acc,
        });
    }
    write_file(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// `eval`: accuracy + confusion of one checkpoint on the target test set
/// (or an explicit FTDS file).
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    dataset: Option<&Path>,
    only_seed: Option<u64>,
) -> Result<f64, HarnessError> {
    write_resolved(cfg, out)?;
    let params = read_ftnn(checkpoint)?;
    let seed = resolve_seeds(cfg, only_seed)[0];
    // File names, not paths: the CSV must not depend on where --out lives.
    let name_of = |p: &Path| {
        p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
    };
    let (ds, ds_name) = match dataset {
        Some(p) => (read_ftds(p)?, name_of(p)),
        None => (generate_domain_data(cfg, seed)?.target_test, format!("target_test_seed{seed}")),
    };
    let (acc, confusion) = evaluate(&params, &ds);
    let mut csv = String::from(
        "checkpoint,dataset,samples,accuracy,c_tl_tl,c_tl_gs,c_tl_tr,c_gs_tl,c_gs_gs,c_gs_tr,c_tr_tl,c_tr_gs,c_tr_tr\n",
    );
    let _ = write!(csv, "{},{},{},{}", name_of(checkpoint), ds_name, ds.len(), acc);
    for row in &confusion {
        for v in row {
            let _ = write!(csv, ",{v}");
        }
    }
    csv.push('\n');
    write_file(&out.join("eval.csv"), csv.as_bytes())?;
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlySummary {
    pub label: String,
    pub worlds: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_distance: f64,
    pub median_distance: f64,
    pub mean_abs_lateral: f64,
    pub distances: Vec<f64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Shared flight loop: the same per-seed world set for every pilot, so
/// summaries compare like for like.
pub fn fly_episodes(
    cfg: &ExperimentConfig,
    pilot: &Pilot,
    seed: u64,
) -> Result<(Vec<EpisodeResult>, FlySummary), HarnessError> {
    let mut results = Vec::with_capacity(cfg.fly_worlds);
    for w in 0..cfg.fly_worlds {
        let world_seed = StreamKey::new(seed, "fly-worlds").derive(w as u64).u64_at(0);
        let world = build_world(&cfg.target, world_seed, cfg.fly_trail_length);
        results.push(run_episode(&world, pilot, &cfg.controller_config(), &cfg.episode_options())?);
    }
    let mut distances: Vec<f64> = results.iter().map(|r| r.distance_along_trail).collect();
    let failures = results.iter().filter(|r| r.failed).count();
    let mean_distance = distances.iter().sum::<f64>() / distances.len() as f64;
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_abs_lateral =
        results.iter().map(|r| r.mean_abs_lateral).sum::<f64>() / results.len() as f64;
    let summary = FlySummary {
        label: String::new(),
        worlds: results.len(),
        failures,
        failure_rate: failures as f64 / results.len() as f64,
        mean_distance,
        median_distance: median(&distances),
        mean_abs_lateral,
        distances,
    };
    Ok((results, summary))
}

/// `fly`: seeded episodes on target-domain worlds for one pilot
/// (checkpoint or geometry oracle); per-episode CSV plus a one-row summary.
pub fn cmd_fly(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    label: Option<&str>,
    only_seed: Option<u64>,
) -> Result<FlySummary, HarnessError> {
    write_resolved(cfg, out)?;
    let seed = resolve_seeds(cfg, only_seed)[0];
    let params: Option<ModelParams>;
    let default_label;
    if oracle {
        params = None;
        default_label = "oracle".to_string();
    } else {
        let path = checkpoint
            .ok_or_else(|| HarnessError::Usage("fly needs --checkpoint or --oracle".into()))?;
        params = Some(read_ftnn(path)?);
        default_label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
    }
    let pilot = match &params {
        Some(p) => Pilot::Model(p),
        None => Pilot::GeometryOracle,
    };
    let label = label.map(str::to_string).unwrap_or(default_label);

    let (results, mut summary) = fly_episodes(cfg, &pilot, seed)?;
    summary.label = label.clone();

    let mut episodes = String::from("world,steps,failed,distance,failure_s,mean_abs_lateral\n");
    for (w, r) in results.iter().enumerate() {
        let failure_s = r.failure_s.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            episodes,
            "{w},{},{},{},{failure_s},{}",
            r.steps, r.failed, r.distance_along_trail, r.mean_abs_lateral
        );
    }
    write_file(&out.join(format!("fly_{label}_episodes.csv")), episodes.as_bytes())?;

    let mut sum_csv = String::from(
        "label,worlds,failures,failure_rate,mean_distance,median_distance,mean_abs_lateral\n",
    );
    let _ = writeln!(
        sum_csv,
        "{},{},{},{},{},{},{}",
        summary.label,
        summary.worlds,
        summary.failures,
        summary.failure_rate,
        summary.mean_distance,
        summary.median_distance,
        summary.mean_abs_lateral
    );
    write_file(&out.join(format!("fly_{label}_summary.csv")), sum_csv.as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
}

/// `sweep-lambda`: per (λ, seed) one full baseline→adapt run (baselines
/// shared across λ within a seed); per-point CSV plus per-λ means.
pub fn cmd_sweep_lambda(
    cfg: &ExperimentConfig,
    out: &Path,
    only_seed: Option<u64>,
) -> Result<Vec<SweepPoint>, HarnessError> {
    write_resolved(cfg, out)?;
    let seeds = resolve_seeds(cfg, only_seed);
    let mut points = Vec::new();
    for &seed in &seeds {
        let data = generate_domain_data(cfg, seed)?;
        let baseline = run_baseline(cfg, &data, seed)?;
        for &lambda in &cfg.lambda_grid {
            let outcome = run_adapt_phase(cfg, &baseline.params, &data, seed, lambda)?;
            let (acc, _) = evaluate(&outcome.params, &data.target_test);
            points.push(SweepPoint { lambda, seed, accuracy: acc });
        }
    }

    let mut csv = String::from("lambda,seed,accuracy\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", p.lambda, p.seed, p.accuracy);
    }
    write_file(&out.join("sweep.csv"), csv.as_bytes())?;

    let mut summary = String::from("lambda,mean_accuracy\n");
    for &lambda in &cfg.lambda_grid {
        let accs: Vec<f64> =
            points.iter().filter(|p| p.lambda == lambda).map(|p| p.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let _ = writeln!(summary, "{lambda},{mean}");
    }
    write_file(&out.join("sweep_summary.csv"), summary.as_bytes())?;
    Ok(points)
}
