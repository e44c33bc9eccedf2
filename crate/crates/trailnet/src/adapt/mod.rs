//! Domain adaptation: the composite objective (classification loss plus
//! λ-weighted MK-MMD penalties between source and target activations at the
//! dense layers), the mini-batch trainer with validation-based model
//! selection, and evaluation.

pub mod mmd;

pub use mmd::{
    median_bandwidth, mmd2, mmd2_grad, permutation_test, Estimator, KernelBank, TwoSampleTest,
};

use crate::data::{Dataset, Label};
use crate::exec;
use crate::nn::{
    self, backward, chw_image, forward, ops, sgd_step, ExtraGrads, ModelParams, NnError, OptState,
    SampleTrace, NUM_CLASSES,
};
use crate::rng::StreamKey;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("all pooled points are identical; median bandwidth is undefined")]
    DegenerateInput,
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Dense layers whose activations can carry an MMD penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptedLayer {
    /// Post-ReLU 64-d feature layer feeding the classifier.
    FcFeat,
    /// Classifier logits.
    FcOut,
}

impl AdaptedLayer {
    pub const ALL: [AdaptedLayer; 2] = [AdaptedLayer::FcFeat, AdaptedLayer::FcOut];

    pub fn token(self) -> &'static str {
        match self {
            AdaptedLayer::FcFeat => "fc_feat",
            AdaptedLayer::FcOut => "fc_out",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.token() == tok)
    }

    fn extract(self, trace: &SampleTrace) -> Vec<f64> {
        match self {
            AdaptedLayer::FcFeat => trace.feat.clone(),
            AdaptedLayer::FcOut => trace.logits.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the summed MMD penalties; 0 disables adaptation entirely.
    pub lambda: f64,
    pub adapted_layers: Vec<AdaptedLayer>,
    /// Mini-batch size per domain (sources and target alike).
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    pub max_iterations: usize,
    pub validation_interval: usize,
    pub kernel_count: usize,
    pub kernel_spread: f64,
}

impl Default for AdaptConfig {
    /// Adaptation-phase settings: fine-tune a converged source model at a
    /// reduced rate with the penalty on the feature layer.
    fn default() -> Self {
        AdaptConfig {
            lambda: 1.0,
            adapted_layers: vec![AdaptedLayer::FcFeat],
            batch: 64,
            lr: 0.003,
            momentum: 0.75,
            lr_decay: 0.5,
            lr_decay_interval: 1000,
            max_iterations: 3000,
            validation_interval: 300,
            kernel_count: 5,
            kernel_spread: 2.0,
        }
    }
}

impl AdaptConfig {
    /// Source-only training settings (no penalty, full learning rate).
    pub fn baseline() -> Self {
        AdaptConfig { lambda: 0.0, lr: 0.05, momentum: 0.9, ..AdaptConfig::default() }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(AdaptError::Argument(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && self.adapted_layers.is_empty() {
            return Err(AdaptError::Argument("lambda > 0 needs at least one adapted layer".into()));
        }
        if self.adapted_layers.len() > 1 && self.adapted_layers[0] == self.adapted_layers[1] {
            return Err(AdaptError::Argument("duplicate adapted layer".into()));
        }
        if self.batch < 2 {
            return Err(AdaptError::Argument(format!("batch must be >= 2, got {}", self.batch)));
        }
        if !(self.lr > 0.0) {
            return Err(AdaptError::Argument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AdaptError::Argument(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(AdaptError::Argument(format!("lr decay must be in (0,1], got {}", self.lr_decay)));
        }
        if self.lr_decay_interval == 0 || self.validation_interval == 0 {
            return Err(AdaptError::Argument("decay/validation intervals must be >= 1".into()));
        }
        if self.kernel_count == 0 || !(self.kernel_spread > 0.0) {
            return Err(AdaptError::Argument("kernel bank needs count >= 1 and spread > 0".into()));
        }
        Ok(())
    }

    /// Checkpoint sidecar: the training settings as `key = value` lines.
    pub fn sidecar_text(&self) -> String {
        let layers =
            self.adapted_layers.iter().map(|l| l.token()).collect::<Vec<_>>().join(",");
        format!(
            "lambda = {}\nadapted_layers = {}\nbatch = {}\nlr = {}\nmomentum = {}\n\
             lr_decay = {}\nlr_decay_interval = {}\nmax_iterations = {}\n\
             validation_interval = {}\nkernel_count = {}\nkernel_spread = {}\n",
            self.lambda,
            layers,
            self.batch,
            self.lr,
            self.momentum,
            self.lr_decay,
            self.lr_decay_interval,
            self.max_iterations,
            self.validation_interval,
            self.kernel_count,
            self.kernel_spread,
        )
    }

    /// Inverse of `sidecar_text`.
    pub fn parse_sidecar(text: &str) -> Result<Self, AdaptError> {
        let mut cfg = AdaptConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AdaptError::Argument(format!("sidecar line {}: missing `=`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| AdaptError::Argument(format!("sidecar line {}: {what}", i + 1));
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad(&format!("bad value `{value}` for {key}")))?
                };
            }
            match key {
                "lambda" => cfg.lambda = num!(),
                "adapted_layers" => {
                    cfg.adapted_layers = value
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            AdaptedLayer::from_token(t)
                                .ok_or_else(|| bad(&format!("unknown layer `{t}`")))
                        })
                        .collect::<Result<_, _>>()?;
                }
                "batch" => cfg.batch = num!(),
                "lr" => cfg.lr = num!(),
                "momentum" => cfg.momentum = num!(),
                "lr_decay" => cfg.lr_decay = num!(),
                "lr_decay_interval" => cfg.lr_decay_interval = num!(),
                "max_iterations" => cfg.max_iterations = num!(),
                "validation_interval" => cfg.validation_interval = num!(),
                "kernel_count" => cfg.kernel_count = num!(),
                "kernel_spread" => cfg.kernel_spread = num!(),
                _ => return Err(bad(&format!("unknown key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bank centered on the pooled median distance; all-identical
    /// activations fall back to a unit bandwidth.
    fn bank_for(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<KernelBank, AdaptError> {
        let sigma0 = match median_bandwidth(xs, ys) {
            Ok(s) => s,
            Err(AdaptError::DegenerateInput) => 1.0,
            Err(e) => return Err(e),
        };
        KernelBank::around(sigma0, self.kernel_count, self.kernel_spread)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRole {
    Source(usize),
    Target,
}

/// Adapted-layer activations of one mini-batch, one row block per
/// configured layer.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub role: BatchRole,
    pub features: Vec<Vec<Vec<f64>>>,
}

impl DomainBatch {
    pub fn from_traces(role: BatchRole, traces: &[SampleTrace], layers: &[AdaptedLayer]) -> Self {
        let features = layers
            .iter()
            .map(|l| traces.iter().map(|t| l.extract(t)).collect())
            .collect();
        DomainBatch { role, features }
    }
}

pub struct SourceBatch {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub ce: f64,
    /// `mmd_terms[source][layer]`, layer order as configured.
    pub mmd_terms: Vec<Vec<f64>>,
}

/// Per-batch MMD values and, optionally, λ-scaled gradients with respect to
/// the activations that produced them.
struct MmdAssembly {
    terms: Vec<Vec<f64>>,
    /// `[source][layer] -> rows`, scaled by λ.
    source_grads: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer] -> rows`, summed over sources, scaled by λ.
    target_grads: Vec<Vec<Vec<f64>>>,
}

fn assemble_mmd(
    cfg: &AdaptConfig,
    sources: &[DomainBatch],
    target: &DomainBatch,
    with_grads: bool,
) -> Result<MmdAssembly, AdaptError> {
    let layers = cfg.adapted_layers.len();
    let mut terms = vec![vec![0.0; layers]; sources.len()];
    let mut source_grads = Vec::with_capacity(sources.len());
    let mut target_grads: Vec<Vec<Vec<f64>>> = Vec::new();
    for (si, src) in sources.iter().enumerate() {
        let mut per_layer = Vec::with_capacity(layers);
        for li in 0..layers {
            let xs = &src.features[li];
            let ys = &target.features[li];
            let bank = cfg.bank_for(xs, ys)?;
            terms[si][li] = mmd2(&bank, xs, ys, Estimator::Unbiased)?;
            if with_grads {
                let (dx, dy) = mmd2_grad(&bank, xs, ys, Estimator::Unbiased)?;
                let scaled: Vec<Vec<f64>> = dx
                    .into_iter()
                    .map(|row| row.into_iter().map(|g| cfg.lambda * g).collect())
                    .collect();
                per_layer.push(scaled);
                if target_grads.len() <= li {
                    target_grads.push(vec![vec![0.0; dy[0].len()]; dy.len()]);
                }
                for (acc, row) in target_grads[li].iter_mut().zip(&dy) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += cfg.lambda * g;
                    }
                }
            }
        }
        source_grads.push(per_layer);
    }
    Ok(MmdAssembly { terms, source_grads, target_grads })
}

fn mean_ce(traces: &[SampleTrace], labels: &[Label]) -> f64 {
    let probs: Vec<Vec<f64>> = traces.iter().map(|t| t.probs.clone()).collect();
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    ops::cross_entropy(&probs, &idx)
}

/// The training objective: mean cross-entropy over the source batches
/// (equal per-source weight) plus λ times each source's MMD to the target
/// at every adapted layer. Forward-only; the trainer reuses the same
/// assembly to inject gradients.
pub fn composite_loss(
    params: &ModelParams,
    source_batches: &[SourceBatch],
    target_images: &[Vec<f64>],
    cfg: &AdaptConfig,
) -> Result<CompositeLoss, AdaptError> {
    cfg.validate()?;
    if source_batches.is_empty() {
        return Err(AdaptError::Argument("need at least one source batch".into()));
    }
    for (i, b) in source_batches.iter().enumerate() {
        if b.images.len() < 2 {
            return Err(AdaptError::Argument(format!("source batch {i} has {} samples, need >= 2", b.images.len())));
        }
        if b.images.len() != b.labels.len() {
            return Err(AdaptError::Argument(format!(
                "source batch {i}: {} images vs {} labels",
                b.images.len(),
                b.labels.len()
            )));
        }
    }
    if cfg.lambda > 0.0 && target_images.len() < 2 {
        return Err(AdaptError::Argument(format!(
            "lambda > 0 needs a target batch of >= 2 samples, got {}",
            target_images.len()
        )));
    }

    let mut ce = 0.0;
    let mut domain_batches = Vec::with_capacity(source_batches.len());
    for (si, b) in source_batches.iter().enumerate() {
        let traces = forward(params, &b.images)?;
        ce += mean_ce(&traces, &b.labels);
        if cfg.lambda > 0.0 {
            domain_batches.push(DomainBatch::from_traces(
                BatchRole::Source(si),
                &traces,
                &cfg.adapted_layers,
            ));
        }
    }
    ce /= source_batches.len() as f64;

    let terms = if cfg.lambda > 0.0 {
        let target_traces = forward(params, target_images)?;
        let target = DomainBatch::from_traces(BatchRole::Target, &target_traces, &cfg.adapted_layers);
        assemble_mmd(cfg, &domain_batches, &target, false)?.terms
    } else {
        vec![vec![0.0; cfg.adapted_layers.len()]; source_batches.len()]
    };

    let penalty: f64 = terms.iter().flatten().sum();
    Ok(CompositeLoss { total: ce + cfg.lambda * penalty, ce, mmd_terms: terms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    /// 1-based iteration count after the step this row describes.
    pub iteration: usize,
    pub lr: f64,
    pub ce: f64,
    /// `mmd[source][layer]`.
    pub mmd: Vec<Vec<f64>>,
    pub total: f64,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
}

/// Extra gradient rows for one batch, split per layer kind.
fn split_extra(
    layers: &[AdaptedLayer],
    grads: &[Vec<Vec<f64>>],
) -> (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>) {
    let mut feat = None;
    let mut logits = None;
    for (layer, rows) in layers.iter().zip(grads) {
        match layer {
            AdaptedLayer::FcFeat => feat = Some(rows.clone()),
            AdaptedLayer::FcOut => logits = Some(rows.clone()),
        }
    }
    (feat, logits)
}

/// Mini-batch SGD on the composite objective, starting from `init` (an
/// initialized or previously trained model). Each iteration draws one batch
/// per source plus one target batch, runs forward, injects λ-scaled MMD
/// gradients at the adapted layers, and steps. Validation accuracy is
/// measured every `validation_interval` iterations and at the final one;
/// the checkpoint with the highest accuracy wins, earliest on ties.
pub fn train_adaptive(
    cfg: &AdaptConfig,
    init: &ModelParams,
    sources: &[&Dataset],
    target_unlabeled: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<TrainOutcome, AdaptError> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(AdaptError::Argument("need at least one source dataset".into()));
    }
    if let Some(i) = sources.iter().position(|d| d.is_empty()) {
        return Err(AdaptError::Argument(format!("source dataset {i} is empty")));
    }
    if cfg.lambda > 0.0 && target_unlabeled.is_empty() {
        return Err(AdaptError::Argument("lambda > 0 needs a nonempty target dataset".into()));
    }
    if val.is_empty() {
        return Err(AdaptError::Argument("validation dataset is empty".into()));
    }

    let mut params = init.clone();
    let mut opt = OptState::new(&params, cfg.lr, cfg.momentum, cfg.lr_decay, cfg.lr_decay_interval);
    let key = StreamKey::new(seed, "adapt-train");
    let mut source_streams: Vec<_> =
        (0..sources.len()).map(|i| key.derive(1 + i as u64).stream()).collect();
    let mut target_stream = key.derive(0).stream();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    if cfg.max_iterations == 0 {
        let (acc, _) = evaluate(&params, val);
        return Ok(TrainOutcome { params, log, best_iteration: 0, best_val_accuracy: acc });
    }

    for t in 0..cfg.max_iterations {
        let lr = opt.current_lr();
        let with_mmd = cfg.lambda > 0.0;

        // Forward every batch for this step.
        let mut grads = params.zeros_like();
        let mut ce = 0.0;
        let ce_scale = 1.0 / sources.len() as f64;
        let mut traces_per_source = Vec::with_capacity(sources.len());
        let mut labels_per_source = Vec::with_capacity(sources.len());
        let mut domain_batches = Vec::with_capacity(sources.len());
        for (si, ds) in sources.iter().enumerate() {
            let idx: Vec<usize> =
                (0..cfg.batch).map(|_| source_streams[si].index(ds.len())).collect();
            let images: Vec<Vec<f64>> = idx.iter().map(|&i| chw_image(ds, i)).collect();
            let labels: Vec<Label> = idx.iter().map(|&i| ds.samples[i].label).collect();
            let traces = forward(&params, &images)?;
            ce += ce_scale * mean_ce(&traces, &labels);
            if with_mmd {
                domain_batches.push(DomainBatch::from_traces(
                    BatchRole::Source(si),
                    &traces,
                    &cfg.adapted_layers,
                ));
            }
            traces_per_source.push(traces);
            labels_per_source.push(labels);
        }

        let mmd_rows;
        if with_mmd {
            let idx: Vec<usize> =
                (0..cfg.batch).map(|_| target_stream.index(target_unlabeled.len())).collect();
            let images: Vec<Vec<f64>> =
                idx.iter().map(|&i| chw_image(target_unlabeled, i)).collect();
            let target_traces = forward(&params, &images)?;
            let target =
                DomainBatch::from_traces(BatchRole::Target, &target_traces, &cfg.adapted_layers);
            let assembly = assemble_mmd(cfg, &domain_batches, &target, true)?;

            for (si, traces) in traces_per_source.iter().enumerate() {
                let (feat, logits) = split_extra(&cfg.adapted_layers, &assembly.source_grads[si]);
                let labels: Vec<Option<Label>> =
                    labels_per_source[si].iter().map(|l| Some(*l)).collect();
                let g = backward(
                    &params,
                    traces,
                    &labels,
                    ce_scale,
                    ExtraGrads { feat: feat.as_deref(), logits: logits.as_deref() },
                )?;
                grads.add_scaled(&g, 1.0);
            }
            let (feat, logits) = split_extra(&cfg.adapted_layers, &assembly.target_grads);
            let none_labels = vec![None; target_traces.len()];
            let g = backward(
                &params,
                &target_traces,
                &none_labels,
                0.0,
                ExtraGrads { feat: feat.as_deref(), logits: logits.as_deref() },
            )?;
            grads.add_scaled(&g, 1.0);
            mmd_rows = assembly.terms;
        } else {
            for (si, traces) in traces_per_source.iter().enumerate() {
                let labels: Vec<Option<Label>> =
                    labels_per_source[si].iter().map(|l| Some(*l)).collect();
                let g = backward(&params, traces, &labels, ce_scale, ExtraGrads::default())?;
                grads.add_scaled(&g, 1.0);
            }
            mmd_rows = vec![vec![0.0; cfg.adapted_layers.len()]; sources.len()];
        }

        sgd_step(&mut params, &grads, &mut opt);

        let iteration = t + 1;
        let val_accuracy = if iteration % cfg.validation_interval == 0
            || iteration == cfg.max_iterations
        {
            let (acc, _) = evaluate(&params, val);
            let better = match &best {
                None => true,
                Some((_, best_acc, _)) => acc > *best_acc,
            };
            if better {
                best = Some((iteration, acc, params.clone()));
            }
            Some(acc)
        } else {
            None
        };

        let penalty: f64 = mmd_rows.iter().flatten().sum();
        log.push(TrainLogRow {
            iteration,
            lr,
            ce,
            mmd: mmd_rows,
            total: ce + cfg.lambda * penalty,
            val_accuracy,
        });
    }

    let (best_iteration, best_val_accuracy, best_params) =
        best.expect("max_iterations >= 1 always validates at least once");
    Ok(TrainOutcome { params: best_params, log, best_iteration, best_val_accuracy })
}

/// Accuracy and 3×3 confusion matrix (rows = true label, columns =
/// predicted). Argmax ties go to the lowest class index.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> (f64, [[usize; NUM_CLASSES]; NUM_CLASSES]) {
    let preds = exec::map_indexed(ds.len(), |i| {
        let probs = nn::predict(params, &chw_image(ds, i));
        let mut arg = 0;
        for (c, p) in probs.iter().enumerate() {
            if *p > probs[arg] {
                arg = c;
            }
        }
        arg
    });
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (i, pred) in preds.iter().enumerate() {
        confusion[ds.samples[i].label.index()][*pred] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let accuracy = if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 };
    (accuracy, confusion)
}
