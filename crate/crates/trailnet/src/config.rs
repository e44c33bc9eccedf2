//! Experiment configuration: a flat `key = value` text format with `#`
//! comments. Unknown and duplicate keys are rejected; every run writes the
//! fully resolved config beside its outputs, and that text parses back to
//! an identical value set.

use crate::adapt::{AdaptConfig, AdaptedLayer};
use crate::data::CaptureOptions;
use crate::flight::{ControllerConfig, EpisodeOptions};
use crate::scene::{DomainSpec, SceneError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Everything a run needs. Domain ids are assigned from list positions:
/// target = 0, sources = 1, 2, … in listed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: String,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
    pub seeds: Vec<u64>,

    // Dataset sizing and capture.
    pub samples_per_source: usize,
    pub samples_target_unlabeled: usize,
    pub samples_target_test: usize,
    pub val_fraction: f64,
    pub image_size: usize,
    pub worlds_per_domain: usize,
    pub trail_length: f64,
    pub lateral_jitter: f64,
    pub yaw_jitter: f64,
    pub augment_mirror: bool,

    // Source-only (baseline) phase.
    pub baseline_lr: f64,
    pub baseline_momentum: f64,
    pub baseline_iterations: usize,

    // Adaptation phase.
    pub adapt_lr: f64,
    pub adapt_momentum: f64,
    pub adapt_iterations: usize,
    pub lambda: f64,
    pub adapted_layers: Vec<AdaptedLayer>,
    pub lambda_grid: Vec<f64>,

    // Shared optimization settings.
    pub batch: usize,
    pub validation_interval: usize,
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    pub kernel_count: usize,
    pub kernel_spread: f64,

    // Flight evaluation.
    pub k_v: f64,
    pub k_yaw: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub yaw_max: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub start_s: f64,
    pub margin_fraction: f64,
    pub fly_worlds: usize,
    pub fly_trail_length: f64,
}

impl Default for ExperimentConfig {
    /// The season-transfer task on trail 1: three snow-free seasons to
    /// winter, everything else at module defaults.
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        let ctrl = ControllerConfig::default();
        let episode = EpisodeOptions::default();
        let capture = CaptureOptions::default();
        ExperimentConfig {
            task: "season".into(),
            sources: vec![
                DomainSpec::from_token("spring-t1-morning", 1).unwrap(),
                DomainSpec::from_token("summer-t1-morning", 2).unwrap(),
                DomainSpec::from_token("autumn-t1-morning", 3).unwrap(),
            ],
            target: DomainSpec::from_token("winter-t1-morning", 0).unwrap(),
            seeds: vec![1, 2, 3],
            samples_per_source: 2000,
            samples_target_unlabeled: 2000,
            samples_target_test: 600,
            val_fraction: 0.1,
            image_size: 32,
            worlds_per_domain: capture.worlds,
            trail_length: capture.trail_length,
            lateral_jitter: capture.lateral_jitter,
            yaw_jitter: capture.yaw_jitter,
            augment_mirror: capture.augment_mirror,
            baseline_lr: 0.05,
            baseline_momentum: 0.9,
            baseline_iterations: 1500,
            adapt_lr: adapt.lr,
            adapt_momentum: adapt.momentum,
            adapt_iterations: adapt.max_iterations,
            lambda: adapt.lambda,
            adapted_layers: adapt.adapted_layers.clone(),
            lambda_grid: vec![0.0, 0.1, 1.0, 10.0, 100.0],
            batch: adapt.batch,
            validation_interval: adapt.validation_interval,
            lr_decay: adapt.lr_decay,
            lr_decay_interval: adapt.lr_decay_interval,
            kernel_count: adapt.kernel_count,
            kernel_spread: adapt.kernel_spread,
            k_v: ctrl.k_v,
            k_yaw: ctrl.k_yaw,
            v_min: ctrl.v_min,
            v_max: ctrl.v_max,
            yaw_max: ctrl.yaw_max,
            dt: episode.dt,
            max_steps: episode.max_steps,
            start_s: episode.start_s,
            margin_fraction: episode.margin_fraction,
            fly_worlds: 20,
            fly_trail_length: 200.0,
        }
    }
}

/// Key order of the resolved output; also the complete set of legal keys.
const KEY_ORDER: [&str; 41] = [
    "task",
    "sources",
    "target",
    "seeds",
    "samples_per_source",
    "samples_target_unlabeled",
    "samples_target_test",
    "val_fraction",
    "image_size",
    "worlds_per_domain",
    "trail_length",
    "lateral_jitter",
    "yaw_jitter",
    "augment_mirror",
    "baseline_lr",
    "baseline_momentum",
    "baseline_iterations",
    "adapt_lr",
    "adapt_momentum",
    "adapt_iterations",
    "lambda",
    "adapted_layers",
    "lambda_grid",
    "batch",
    "validation_interval",
    "lr_decay",
    "lr_decay_interval",
    "kernel_count",
    "kernel_spread",
    "k_v",
    "k_yaw",
    "v_min",
    "v_max",
    "yaw_max",
    "dt",
    "max_steps",
    "start_s",
    "margin_fraction",
    "fly_worlds",
    "fly_trail_length",
    "fly_checkpoint_label",
];

fn parse_val<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Parse {
        line,
        what: format!("bad value `{v}` for {key}"),
    })
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_val(line, key, s))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Parse { line, what: format!("expected key = value, got `{content}`") });
            };
            let key = key.trim();
            let value = value.trim();
            if !KEY_ORDER.contains(&key) {
                return Err(ConfigError::Parse { line, what: format!("unknown key `{key}`") });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Parse { line, what: format!("duplicate key `{key}`") });
            }
            seen.push(key.to_string());
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "task" => self.task = value.to_string(),
            "sources" => {
                let tokens: Vec<&str> =
                    value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                self.sources = tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| DomainSpec::from_token(t, 1 + i as u16))
                    .collect::<Result<_, _>>()?;
            }
            "target" => self.target = DomainSpec::from_token(value, 0)?,
            "seeds" => self.seeds = parse_list(line, key, value)?,
            "samples_per_source" => self.samples_per_source = parse_val(line, key, value)?,
            "samples_target_unlabeled" => self.samples_target_unlabeled = parse_val(line, key, value)?,
            "samples_target_test" => self.samples_target_test = parse_val(line, key, value)?,
            "val_fraction" => self.val_fraction = parse_val(line, key, value)?,
            "image_size" => self.image_size = parse_val(line, key, value)?,
            "worlds_per_domain" => self.worlds_per_domain = parse_val(line, key, value)?,
            "trail_length" => self.trail_length = parse_val(line, key, value)?,
            "lateral_jitter" => self.lateral_jitter = parse_val(line, key, value)?,
            "yaw_jitter" => self.yaw_jitter = parse_val(line, key, value)?,
            "augment_mirror" => self.augment_mirror = parse_val(line, key, value)?,
            "baseline_lr" => self.baseline_lr = parse_val(line, key, value)?,
            "baseline_momentum" => self.baseline_momentum = parse_val(line, key, value)?,
            "baseline_iterations" => self.baseline_iterations = parse_val(line, key, value)?,
            "adapt_lr" => self.adapt_lr = parse_val(line, key, value)?,
            "adapt_momentum" => self.adapt_momentum = parse_val(line, key, value)?,
            "adapt_iterations" => self.adapt_iterations = parse_val(line, key, value)?,
            "lambda" => self.lambda = parse_val(line, key, value)?,
            "adapted_layers" => {
                self.adapted_layers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|t| {
                        AdaptedLayer::from_token(t).ok_or(ConfigError::Parse {
                            line,
                            what: format!("unknown adapted layer `{t}`"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
            }
            "lambda_grid" => self.lambda_grid = parse_list(line, key, value)?,
            "batch" => self.batch = parse_val(line, key, value)?,
            "validation_interval" => self.validation_interval = parse_val(line, key, value)?,
            "lr_decay" => self.lr_decay = parse_val(line, key, value)?,
            "lr_decay_interval" => self.lr_decay_interval = parse_val(line, key, value)?,
            "kernel_count" => self.kernel_count = parse_val(line, key, value)?,
            "kernel_spread" => self.kernel_spread = parse_val(line, key, value)?,
            "k_v" => self.k_v = parse_val(line, key, value)?,
            "k_yaw" => self.k_yaw = parse_val(line, key, value)?,
            "v_min" => self.v_min = parse_val(line, key, value)?,
            "v_max" => self.v_max = parse_val(line, key, value)?,
            "yaw_max" => self.yaw_max = parse_val(line, key, value)?,
            "dt" => self.dt = parse_val(line, key, value)?,
            "max_steps" => self.max_steps = parse_val(line, key, value)?,
            "start_s" => self.start_s = parse_val(line, key, value)?,
            "margin_fraction" => self.margin_fraction = parse_val(line, key, value)?,
            "fly_worlds" => self.fly_worlds = parse_val(line, key, value)?,
            "fly_trail_length" => self.fly_trail_length = parse_val(line, key, value)?,
            // Accepted for forward compatibility of resolved files; the
            // label only annotates fly summaries and is set per run.
            "fly_checkpoint_label" => {}
            _ => unreachable!("key filtered above"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sources.is_empty() {
            return Err(ConfigError::Invalid("need at least one source domain".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("need at least one seed".into()));
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(ConfigError::Invalid("duplicate seeds".into()));
            }
        }
        for s in self.sources.iter().chain([&self.target]) {
            s.validate()?;
        }
        if self.sources.iter().any(|s| s.token() == self.target.token()) {
            return Err(ConfigError::Invalid(format!(
                "target domain {} also appears as a source",
                self.target.token()
            )));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(ConfigError::Invalid(format!(
                "image_size must be >= 16 and divisible by 8, got {}",
                self.image_size
            )));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        for (name, v) in [
            ("samples_per_source", self.samples_per_source),
            ("samples_target_unlabeled", self.samples_target_unlabeled),
            ("samples_target_test", self.samples_target_test),
            ("worlds_per_domain", self.worlds_per_domain),
            ("baseline_iterations", self.baseline_iterations),
            ("adapt_iterations", self.adapt_iterations),
            ("fly_worlds", self.fly_worlds),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.trail_length > 0.0) || !(self.fly_trail_length > 0.0) {
            return Err(ConfigError::Invalid("trail lengths must be positive".into()));
        }
        {
            let mut grid = self.lambda_grid.clone();
            grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if grid.windows(2).any(|w| w[0] == w[1]) {
                return Err(ConfigError::Invalid("duplicate lambda_grid values".into()));
            }
            if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
                return Err(ConfigError::Invalid("lambda_grid needs nonnegative values".into()));
            }
        }
        self.baseline_adapt_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("baseline settings: {e}")))?;
        self.adapt_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("adapt settings: {e}")))?;
        self.controller_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("controller settings: {e}")))?;
        if !(self.dt > 0.0) || self.max_steps == 0 || !(self.start_s >= 0.0) || !(self.margin_fraction >= 0.0)
        {
            return Err(ConfigError::Invalid("bad episode settings (dt, max_steps, start_s, margin_fraction)".into()));
        }
        Ok(())
    }

    /// Canonical resolved text; parses back to an equal config.
    pub fn resolved_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let floats = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let mut out = String::from("# resolved experiment configuration\n");
        for key in KEY_ORDER {
            let value = match key {
                "task" => self.task.clone(),
                "sources" => join(&self.sources.iter().map(|s| s.token()).collect::<Vec<_>>()),
                "target" => self.target.token(),
                "seeds" => join(&self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
                "samples_per_source" => self.samples_per_source.to_string(),
                "samples_target_unlabeled" => self.samples_target_unlabeled.to_string(),
                "samples_target_test" => self.samples_target_test.to_string(),
                "val_fraction" => self.val_fraction.to_string(),
                "image_size" => self.image_size.to_string(),
                "worlds_per_domain" => self.worlds_per_domain.to_string(),
                "trail_length" => self.trail_length.to_string(),
                "lateral_jitter" => self.lateral_jitter.to_string(),
                "yaw_jitter" => self.yaw_jitter.to_string(),
                "augment_mirror" => self.augment_mirror.to_string(),
                "baseline_lr" => self.baseline_lr.to_string(),
                "baseline_momentum" => self.baseline_momentum.to_string(),
                "baseline_iterations" => self.baseline_iterations.to_string(),
                "adapt_lr" => self.adapt_lr.to_string(),
                "adapt_momentum" => self.adapt_momentum.to_string(),
                "adapt_iterations" => self.adapt_iterations.to_string(),
                "lambda" => self.lambda.to_string(),
                "adapted_layers" => {
                    join(&self.adapted_layers.iter().map(|l| l.token().to_string()).collect::<Vec<_>>())
                }
                "lambda_grid" => join(&floats(&self.lambda_grid)),
                "batch" => self.batch.to_string(),
                "validation_interval" => self.validation_interval.to_string(),
                "lr_decay" => self.lr_decay.to_string(),
                "lr_decay_interval" => self.lr_decay_interval.to_string(),
                "kernel_count" => self.kernel_count.to_string(),
                "kernel_spread" => self.kernel_spread.to_string(),
                "k_v" => self.k_v.to_string(),
                "k_yaw" => self.k_yaw.to_string(),
                "v_min" => self.v_min.to_string(),
                "v_max" => self.v_max.to_string(),
                "yaw_max" => self.yaw_max.to_string(),
                "dt" => self.dt.to_string(),
                "max_steps" => self.max_steps.to_string(),
                "start_s" => self.start_s.to_string(),
                "margin_fraction" => self.margin_fraction.to_string(),
                "fly_worlds" => self.fly_worlds.to_string(),
                "fly_trail_length" => self.fly_trail_length.to_string(),
                "fly_checkpoint_label" => continue,
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Source-only phase settings (λ = 0).
    pub fn baseline_adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            lambda: 0.0,
            adapted_layers: self.adapted_layers.clone(),
            batch: self.batch,
            lr: self.baseline_lr,
            momentum: self.baseline_momentum,
            lr_decay: self.lr_decay,
            lr_decay_interval: self.lr_decay_interval,
            max_iterations: self.baseline_iterations,
            validation_interval: self.validation_interval,
            kernel_count: self.kernel_count,
            kernel_spread: self.kernel_spread,
        }
    }

    /// Adaptation-phase settings at the configured λ.
    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            lambda: self.lambda,
            lr: self.adapt_lr,
            momentum: self.adapt_momentum,
            max_iterations: self.adapt_iterations,
            ..self.baseline_adapt_config()
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            k_v: self.k_v,
            k_yaw: self.k_yaw,
            v_min: self.v_min,
            v_max: self.v_max,
            yaw_max: self.yaw_max,
        }
    }

    pub fn episode_options(&self) -> EpisodeOptions {
        EpisodeOptions {
            dt: self.dt,
            max_steps: self.max_steps,
            start_s: self.start_s,
            image_size: self.image_size,
            margin_fraction: self.margin_fraction,
            frame_dump: None,
        }
    }

    pub fn capture_options(&self) -> CaptureOptions {
        CaptureOptions {
            worlds: self.worlds_per_domain,
            frames_per_world: 0, // sized per dataset by the harness
            width: self.image_size,
            height: self.image_size,
            trail_length: self.trail_length,
            augment_mirror: self.augment_mirror,
            lateral_jitter: self.lateral_jitter,
            yaw_jitter: self.yaw_jitter,
        }
    }
}
