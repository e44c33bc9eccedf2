//! Compact conv net for the three-class heading task.
//!
//! Architecture: three blocks of (3x3 conv pad 1 -> ReLU -> 2x2 max pool)
//! with channel widths 3 -> 16 -> 32 -> 64, then a dense layer to a 64-d
//! feature (`fc_feat`, ReLU — this is the representation the domain
//! adaptation regularizer acts on), then a dense head to 3 logits
//! (`fc_out`). All math is f64; checkpoints store f32.

pub mod checkpoint;
pub mod ops;

use crate::data::{Dataset, Label};
use crate::exec;
use crate::rng::StreamKey;

pub const CHANNELS: [usize; 4] = [3, 16, 32, 64];
pub const FEAT_DIM: usize = 64;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("image size {0} unsupported: must be >= 16 and divisible by 8")]
    BadImageSize(usize),
    #[error("non-finite value in input sample {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
}

/// Dense array with shape metadata. Kept deliberately minimal — the kernels
/// in `ops` work on flat slices and the shapes only matter at the seams
/// (init, checkpoints, shape checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub image_size: usize,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub fc_feat_w: Tensor,
    pub fc_feat_b: Tensor,
    pub fc_out_w: Tensor,
    pub fc_out_b: Tensor,
}

/// Fixed tensor order used by checkpoints, the optimizer, and gradient
/// checks.
pub const TENSOR_NAMES: [&str; 10] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc_feat.w", "fc_feat.b",
    "fc_out.w", "fc_out.b",
];

impl ModelParams {
    /// Flattened spatial size after the three pooling stages.
    pub fn flat_dim(image_size: usize) -> usize {
        let side = image_size / 8;
        CHANNELS[3] * side * side
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
            &self.fc_feat_w,
            &self.fc_feat_b,
            &self.fc_out_w,
            &self.fc_out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.fc_feat_w,
            &mut self.fc_feat_b,
            &mut self.fc_out_w,
            &mut self.fc_out_b,
        ]
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }
}

/// Tensor shapes and weight fan-in (0 for biases) for a given image size,
/// in `TENSOR_NAMES` order. Shared by init and checkpoint validation.
pub(crate) fn tensor_shapes(image_size: usize) -> [(Vec<usize>, usize); 10] {
    let flat = ModelParams::flat_dim(image_size);
    [
        (vec![CHANNELS[1], CHANNELS[0], 3, 3], CHANNELS[0] * 9),
        (vec![CHANNELS[1]], 0),
        (vec![CHANNELS[2], CHANNELS[1], 3, 3], CHANNELS[1] * 9),
        (vec![CHANNELS[2]], 0),
        (vec![CHANNELS[3], CHANNELS[2], 3, 3], CHANNELS[2] * 9),
        (vec![CHANNELS[3]], 0),
        (vec![FEAT_DIM, flat], flat),
        (vec![FEAT_DIM], 0),
        (vec![NUM_CLASSES, FEAT_DIM], FEAT_DIM),
        (vec![NUM_CLASSES], 0),
    ]
}

/// MSRA (He) initialization: weights ~ N(0, sqrt(2/fan_in)), biases 0.
pub fn init_params(seed: u64, image_size: usize) -> Result<ModelParams, NnError> {
    if image_size < 16 || image_size % 8 != 0 {
        return Err(NnError::BadImageSize(image_size));
    }
    let shapes = tensor_shapes(image_size);
    let key = StreamKey::new(seed, "init");
    let mut built: Vec<Tensor> = Vec::with_capacity(10);
    for (ti, (shape, fan_in)) in shapes.iter().enumerate() {
        let mut t = Tensor::zeros(shape);
        if *fan_in > 0 {
            let std = (2.0 / *fan_in as f64).sqrt();
            let tk = key.derive(ti as u64);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = std * tk.normal_at(i as u64);
            }
        }
        built.push(t);
    }
    let mut it = built.into_iter();
    Ok(ModelParams {
        image_size,
        conv1_w: it.next().unwrap(),
        conv1_b: it.next().unwrap(),
        conv2_w: it.next().unwrap(),
        conv2_b: it.next().unwrap(),
        conv3_w: it.next().unwrap(),
        conv3_b: it.next().unwrap(),
        fc_feat_w: it.next().unwrap(),
        fc_feat_b: it.next().unwrap(),
        fc_out_w: it.next().unwrap(),
        fc_out_b: it.next().unwrap(),
    })
}

/// Per-sample forward cache; everything backward needs.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    input: Vec<f64>,
    conv_pre: [Vec<f64>; 3],
    pooled: [Vec<f64>; 3],
    pool_idx: [Vec<u32>; 3],
    feat_pre: Vec<f64>,
    /// Post-ReLU `fc_feat` activation — the adaptation-layer representation.
    pub feat: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn forward_one(params: &ModelParams, input: Vec<f64>) -> SampleTrace {
    let s = params.image_size;
    let sizes = [s, s / 2, s / 4];
    let convs = [
        (&params.conv1_w, &params.conv1_b, CHANNELS[0], CHANNELS[1]),
        (&params.conv2_w, &params.conv2_b, CHANNELS[1], CHANNELS[2]),
        (&params.conv3_w, &params.conv3_b, CHANNELS[2], CHANNELS[3]),
    ];
    let mut conv_pre: [Vec<f64>; 3] = Default::default();
    let mut pooled: [Vec<f64>; 3] = Default::default();
    let mut pool_idx: [Vec<u32>; 3] = Default::default();
    let mut cur = &input;
    for k in 0..3 {
        let (w, b, in_ch, out_ch) = convs[k];
        let side = sizes[k];
        let mut pre = vec![0.0; out_ch * side * side];
        ops::conv3x3_forward(cur, in_ch, side, &w.data, &b.data, out_ch, &mut pre);
        let half = side / 2;
        let mut pool = vec![0.0; out_ch * half * half];
        let mut idx = vec![0u32; out_ch * half * half];
        ops::relu_pool2_forward(&pre, out_ch, side, &mut pool, &mut idx);
        conv_pre[k] = pre;
        pooled[k] = pool;
        pool_idx[k] = idx;
        cur = &pooled[k];
    }
    let mut feat_pre = vec![0.0; FEAT_DIM];
    ops::fc_forward(&pooled[2], &params.fc_feat_w.data, &params.fc_feat_b.data, &mut feat_pre);
    let feat: Vec<f64> = feat_pre.iter().map(|v| v.max(0.0)).collect();
    let mut logits = vec![0.0; NUM_CLASSES];
    ops::fc_forward(&feat, &params.fc_out_w.data, &params.fc_out_b.data, &mut logits);
    let probs = ops::softmax(&logits);
    SampleTrace { input, conv_pre, pooled, pool_idx, feat_pre, feat, logits, probs }
}

/// Batch forward. Inputs are channels-first `3*S*S` images in [0, 1];
/// non-finite values are an argument error. Work is distributed across
/// samples; outputs are index-ordered regardless of thread count.
pub fn forward(params: &ModelParams, images: &[Vec<f64>]) -> Result<Vec<SampleTrace>, NnError> {
    let expect = CHANNELS[0] * params.image_size * params.image_size;
    for (i, img) in images.iter().enumerate() {
        if img.len() != expect {
            return Err(NnError::ShapeMismatch(format!(
                "sample {i} has {} values, expected {expect}",
                img.len()
            )));
        }
        if img.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput(i));
        }
    }
    Ok(exec::map_indexed(images.len(), |i| forward_one(params, images[i].clone())))
}

/// Probabilities for a single image; lean path for evaluation and flight.
pub fn predict(params: &ModelParams, image: &[f64]) -> [f64; NUM_CLASSES] {
    let t = forward_one(params, image.to_vec());
    [t.probs[0], t.probs[1], t.probs[2]]
}

/// Adaptation-layer feature and class probabilities from a frozen-routing
/// forward pass.
#[derive(Debug, Clone)]
pub struct FrozenOut {
    pub feat: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Forward pass that reuses the ReLU masks and pool winners recorded in
/// `reference`, which makes the loss a smooth function of the parameters.
/// At the reference parameters it reproduces `forward` exactly; finite-
/// difference gradient checks probe this function so that a step of δ never
/// crosses an activation kink (the analytic backward differentiates exactly
/// this linearization).
pub fn forward_frozen(params: &ModelParams, reference: &[SampleTrace]) -> Vec<FrozenOut> {
    exec::map_indexed(reference.len(), |i| {
        let r = &reference[i];
        let s = params.image_size;
        let sizes = [s, s / 2, s / 4];
        let convs = [
            (&params.conv1_w, &params.conv1_b, CHANNELS[0], CHANNELS[1]),
            (&params.conv2_w, &params.conv2_b, CHANNELS[1], CHANNELS[2]),
            (&params.conv3_w, &params.conv3_b, CHANNELS[2], CHANNELS[3]),
        ];
        let mut cur = r.input.clone();
        for k in 0..3 {
            let (w, b, in_ch, out_ch) = convs[k];
            let side = sizes[k];
            let mut pre = vec![0.0; out_ch * side * side];
            ops::conv3x3_forward(&cur, in_ch, side, &w.data, &b.data, out_ch, &mut pre);
            let half = side / 2;
            let plane = side * side;
            let pplane = half * half;
            let mut pool = vec![0.0; out_ch * pplane];
            for c in 0..out_ch {
                for p in 0..pplane {
                    let fi = c * plane + r.pool_idx[k][c * pplane + p] as usize;
                    if r.conv_pre[k][fi] > 0.0 {
                        pool[c * pplane + p] = pre[fi];
                    }
                }
            }
            cur = pool;
        }
        let mut feat_pre = vec![0.0; FEAT_DIM];
        ops::fc_forward(&cur, &params.fc_feat_w.data, &params.fc_feat_b.data, &mut feat_pre);
        let feat: Vec<f64> = feat_pre
            .iter()
            .zip(&r.feat_pre)
            .map(|(v, rp)| if *rp > 0.0 { *v } else { 0.0 })
            .collect();
        let mut logits = vec![0.0; NUM_CLASSES];
        ops::fc_forward(&feat, &params.fc_out_w.data, &params.fc_out_b.data, &mut logits);
        let probs = ops::softmax(&logits);
        FrozenOut { feat, probs }
    })
}

/// Extra gradient contributions injected at the adaptation layers (already
/// scaled by the caller). `feat` rows land on the post-ReLU `fc_feat`
/// activation, `logits` rows on the `fc_out` output.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExtraGrads<'a> {
    pub feat: Option<&'a [Vec<f64>]>,
    pub logits: Option<&'a [Vec<f64>]>,
}

/// Gradients of `ce_scale * meanCE(labeled samples) + injected terms`
/// with respect to every parameter tensor. `labels[i] = None` marks an
/// unlabeled sample (no cross-entropy contribution). Per-sample work is
/// chunked; chunk partials are reduced in fixed order.
pub fn backward(
    params: &ModelParams,
    traces: &[SampleTrace],
    labels: &[Option<Label>],
    ce_scale: f64,
    extra: ExtraGrads,
) -> Result<ModelParams, NnError> {
    if labels.len() != traces.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {} traces",
            labels.len(),
            traces.len()
        )));
    }
    for (name, rows) in [("feat", extra.feat), ("logits", extra.logits)] {
        if let Some(rows) = rows {
            let dim = if name == "feat" { FEAT_DIM } else { NUM_CLASSES };
            if rows.len() != traces.len() || rows.iter().any(|r| r.len() != dim) {
                return Err(NnError::ShapeMismatch(format!("extra {name} grad shape")));
            }
        }
    }

    let n_labeled = labels.iter().filter(|l| l.is_some()).count();
    let d_logits: Vec<[f64; NUM_CLASSES]> = traces
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (t, label))| {
            let mut d = [0.0; NUM_CLASSES];
            if let Some(y) = label {
                let scale = ce_scale / n_labeled as f64;
                for c in 0..NUM_CLASSES {
                    d[c] = scale * (t.probs[c] - if c == y.index() { 1.0 } else { 0.0 });
                }
            }
            if let Some(rows) = extra.logits {
                for c in 0..NUM_CLASSES {
                    d[c] += rows[i][c];
                }
            }
            d
        })
        .collect();

    let chunks = exec::chunk_ranges(traces.len(), 8);
    let partials = exec::map_indexed(chunks.len(), |ci| {
        let mut grads = params.zeros_like();
        for i in chunks[ci].clone() {
            backward_one(params, &traces[i], &d_logits[i], extra.feat.map(|r| r[i].as_slice()), &mut grads);
        }
        grads
    });
    let mut total = params.zeros_like();
    for p in partials {
        total.add_scaled(&p, 1.0);
    }
    Ok(total)
}

fn backward_one(
    params: &ModelParams,
    t: &SampleTrace,
    d_logits: &[f64; NUM_CLASSES],
    d_feat_extra: Option<&[f64]>,
    grads: &mut ModelParams,
) {
    let s = params.image_size;

    // Head.
    let mut d_feat = vec![0.0; FEAT_DIM];
    ops::fc_backward(
        &t.feat,
        &params.fc_out_w.data,
        d_logits,
        Some(&mut d_feat),
        &mut grads.fc_out_w.data,
        &mut grads.fc_out_b.data,
    );
    if let Some(extra) = d_feat_extra {
        for (d, e) in d_feat.iter_mut().zip(extra) {
            *d += e;
        }
    }
    // ReLU on fc_feat.
    for (d, pre) in d_feat.iter_mut().zip(&t.feat_pre) {
        if *pre <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_pool3 = vec![0.0; t.pooled[2].len()];
    ops::fc_backward(
        &t.pooled[2],
        &params.fc_feat_w.data,
        &d_feat,
        Some(&mut d_pool3),
        &mut grads.fc_feat_w.data,
        &mut grads.fc_feat_b.data,
    );

    // Conv stack, top down.
    let sizes = [s, s / 2, s / 4];
    let mut d_pooled = d_pool3;
    for k in (0..3).rev() {
        let side = sizes[k];
        let (w, in_ch, out_ch) = match k {
            0 => (&params.conv1_w, CHANNELS[0], CHANNELS[1]),
            1 => (&params.conv2_w, CHANNELS[1], CHANNELS[2]),
            _ => (&params.conv3_w, CHANNELS[2], CHANNELS[3]),
        };
        let mut d_pre = vec![0.0; out_ch * side * side];
        ops::relu_pool2_backward(&t.conv_pre[k], out_ch, side, &d_pooled, &t.pool_idx[k], &mut d_pre);
        let input = if k == 0 { &t.input } else { &t.pooled[k - 1] };
        let mut d_input = if k > 0 { Some(vec![0.0; input.len()]) } else { None };
        let (d_w, d_b) = match k {
            0 => (&mut grads.conv1_w, &mut grads.conv1_b),
            1 => (&mut grads.conv2_w, &mut grads.conv2_b),
            _ => (&mut grads.conv3_w, &mut grads.conv3_b),
        };
        ops::conv3x3_backward(
            input,
            in_ch,
            side,
            &w.data,
            out_ch,
            &d_pre,
            d_input.as_deref_mut(),
            &mut d_w.data,
            &mut d_b.data,
        );
        if let Some(di) = d_input {
            d_pooled = di;
        }
    }
}

/// SGD with classical momentum and stepwise learning-rate decay:
/// v <- mu*v - lr*g; w <- w + v; lr = lr0 * decay^(iter / interval).
#[derive(Debug, Clone)]
pub struct OptState {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub iteration: usize,
    pub velocity: ModelParams,
}

impl OptState {
    pub fn new(params: &ModelParams, lr0: f64, momentum: f64, decay: f64, decay_interval: usize) -> Self {
        assert!(lr0 > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert!(decay_interval > 0);
        OptState { lr0, momentum, decay, decay_interval, iteration: 0, velocity: params.zeros_like() }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr0 * self.decay.powi((self.iteration / self.decay_interval) as i32)
    }
}

pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptState) {
    let lr = opt.current_lr();
    let mu = opt.momentum;
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
    {
        debug_assert_eq!(p.shape, g.shape);
        for i in 0..p.data.len() {
            v.data[i] = mu * v.data[i] - lr * g.data[i];
            p.data[i] += v.data[i];
        }
    }
    opt.iteration += 1;
}

/// Channels-first f64 image of dataset sample `i` (datasets store
/// interleaved rows).
pub fn chw_image(ds: &Dataset, i: usize) -> Vec<f64> {
    let (w, h, ch) = (ds.width, ds.height, ds.channels);
    let hwc = &ds.samples[i].pixels;
    let mut out = vec![0.0; w * h * ch];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out[c * w * h + y * w + x] = f64::from(hwc[(y * w + x) * ch + c]) / 255.0;
            }
        }
    }
    out
}
