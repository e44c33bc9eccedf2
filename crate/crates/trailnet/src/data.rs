//! Dataset capture and storage.
//!
//! Training images come from a three-camera rig carried along the trail:
//! one camera yawed 30 degrees left (labelled "turn right" — that is what a
//! drone seeing this view should do), one straight ahead ("go straight"),
//! one 30 degrees right ("turn left"). Mirror augmentation doubles the set
//! by flipping images horizontally and swapping the turn labels, which is
//! exact because the renderer commutes with mirroring.
//!
//! Datasets are stored in a little-endian binary container (magic `FTDS`)
//! with 8-bit pixels; read errors report the byte offset of the problem.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::exec;
use crate::rng::Stream;
use crate::scene::{build_world, render, CameraPose, DomainSpec, Image, TrailWorld, DEFAULT_PITCH};

pub const FTDS_MAGIC: &[u8; 4] = b"FTDS";
pub const FTDS_VERSION: u32 = 1;

/// Camera yaw offsets in radians, rightward positive, in capture order
/// (left-looking, center, right-looking).
pub const CAMERA_OFFSETS: [f64; 3] = [
    -30.0 * std::f64::consts::PI / 180.0,
    0.0,
    30.0 * std::f64::consts::PI / 180.0,
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
}

/// Heading class. The numeric codes are the on-disk representation and the
/// classifier's output index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    TurnLeft,
    GoStraight,
    TurnRight,
}

impl Label {
    pub const COUNT: usize = 3;

    pub fn to_u8(self) -> u8 {
        match self {
            Label::TurnLeft => 0,
            Label::GoStraight => 1,
            Label::TurnRight => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::TurnLeft),
            1 => Some(Label::GoStraight),
            2 => Some(Label::TurnRight),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.to_u8() as usize
    }

    /// Label of the horizontally mirrored view.
    pub fn mirrored(self) -> Self {
        match self {
            Label::TurnLeft => Label::TurnRight,
            Label::GoStraight => Label::GoStraight,
            Label::TurnRight => Label::TurnLeft,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::TurnLeft => "TL",
            Label::GoStraight => "GS",
            Label::TurnRight => "TR",
        }
    }
}

/// One stored frame: quantized pixels plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: Label,
    pub domain_id: u16,
    /// Arc length of the rig position on its trail.
    pub s: f32,
    /// Signed lateral offset of the rig from the centerline, meters.
    pub lateral: f32,
    /// Base-yaw perturbation applied at capture, radians.
    pub yaw_jitter: f32,
    /// Row-major interleaved channels, `width * height * channels` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Dataset { width, height, channels, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height * self.channels
    }

    /// Dequantized image of sample `i`, channels in [0, 1].
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.samples[i].pixels.iter().map(|p| f64::from(*p) / 255.0).collect()
    }

    pub fn label_counts(&self) -> [usize; Label::COUNT] {
        let mut counts = [0; Label::COUNT];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// Deterministic shuffled split; `val_fraction` of samples go to the
    /// second dataset.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        assert!((0.0..=1.0).contains(&val_fraction));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Stream::new(seed, "split").shuffle(&mut idx);
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let mut val = Dataset::new(self.width, self.height, self.channels);
        let mut train = Dataset::new(self.width, self.height, self.channels);
        for (k, &i) in idx.iter().enumerate() {
            let target = if k < n_val { &mut val } else { &mut train };
            target.samples.push(self.samples[i].clone());
        }
        (train, val)
    }

    /// Concatenate datasets with identical geometry.
    pub fn merged(parts: &[&Dataset]) -> Dataset {
        assert!(!parts.is_empty());
        let mut out = Dataset::new(parts[0].width, parts[0].height, parts[0].channels);
        for p in parts {
            assert_eq!(
                (p.width, p.height, p.channels),
                (out.width, out.height, out.channels),
                "merged datasets must share geometry"
            );
            out.samples.extend(p.samples.iter().cloned());
        }
        out
    }
}

/// Knobs for dataset capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureOptions {
    pub worlds: usize,
    /// Rig positions per world; each yields three samples (one per camera).
    pub frames_per_world: usize,
    pub width: usize,
    pub height: usize,
    pub trail_length: f64,
    /// Add the horizontally mirrored copy of every sample.
    pub augment_mirror: bool,
    /// Max |lateral offset| of the rig from the centerline, meters.
    pub lateral_jitter: f64,
    /// Max |base yaw perturbation|, radians.
    pub yaw_jitter: f64,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        CaptureOptions {
            worlds: 4,
            frames_per_world: 128,
            width: 32,
            height: 32,
            trail_length: 200.0,
            augment_mirror: true,
            lateral_jitter: 0.45,
            yaw_jitter: 0.15,
        }
    }
}

fn quantize_image(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|v| crate::scene::render::quantize(*v)).collect()
}

fn flip_bytes(pixels: &[u8], width: usize, height: usize, channels: usize) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    let row = width * channels;
    for r in 0..height {
        for c in 0..width {
            let src = r * row + (width - 1 - c) * channels;
            let dst = r * row + c * channels;
            out[dst..dst + channels].copy_from_slice(&pixels[src..src + channels]);
        }
    }
    out
}

/// Rig placement for one frame, drawn ahead of time so rendering can run in
/// parallel without touching shared state.
#[derive(Clone, Copy)]
struct FramePlan {
    world: usize,
    s: f64,
    lateral: f64,
    yaw_jitter: f64,
}

/// Render a labelled dataset for one domain. Deterministic in
/// (spec, seed, opts); parallelism only distributes the per-frame work.
pub fn capture_dataset(spec: &DomainSpec, seed: u64, opts: &CaptureOptions) -> Dataset {
    assert!(opts.worlds > 0 && opts.frames_per_world > 0);
    let worlds: Vec<TrailWorld> = (0..opts.worlds)
        .map(|w| build_world(spec, seed.wrapping_add(w as u64), opts.trail_length))
        .collect();

    let margin = 6.0;
    let mut plans = Vec::with_capacity(opts.worlds * opts.frames_per_world);
    for (wi, world) in worlds.iter().enumerate() {
        let mut rig = Stream::new(seed.wrapping_add(wi as u64), "capture");
        for _ in 0..opts.frames_per_world {
            plans.push(FramePlan {
                world: wi,
                s: rig.range_f64(margin, world.total_length() - margin),
                lateral: rig.range_f64(-opts.lateral_jitter, opts.lateral_jitter),
                yaw_jitter: rig.range_f64(-opts.yaw_jitter, opts.yaw_jitter),
            });
        }
    }

    let triplets = exec::map_indexed(plans.len(), |i| {
        let plan = plans[i];
        capture_triplet(&worlds[plan.world], plan, opts)
    });

    let mut ds = Dataset::new(opts.width, opts.height, 3);
    for triplet in triplets {
        for sample in triplet {
            if opts.augment_mirror {
                let mirrored = mirror_sample(&sample, opts.width, opts.height, 3);
                ds.samples.push(sample);
                ds.samples.push(mirrored);
            } else {
                ds.samples.push(sample);
            }
        }
    }
    ds
}

fn capture_triplet(world: &TrailWorld, plan: FramePlan, opts: &CaptureOptions) -> Vec<Sample> {
    let f = world.trail_frame(plan.s).expect("capture stays inside the trail");
    let (nx, ny) = (-f.heading.sin(), f.heading.cos());
    let base_yaw = f.heading + plan.yaw_jitter;
    let labels = [Label::TurnRight, Label::GoStraight, Label::TurnLeft];
    CAMERA_OFFSETS
        .iter()
        .zip(labels)
        .map(|(offset, label)| {
            let pose = CameraPose {
                x: f.x + plan.lateral * nx,
                y: f.y + plan.lateral * ny,
                height: world.spec.camera_height(),
                yaw: base_yaw - offset,
                pitch: DEFAULT_PITCH,
            };
            let img = render(world, &pose, opts.width, opts.height);
            Sample {
                label,
                domain_id: world.spec.domain_id,
                s: plan.s as f32,
                lateral: plan.lateral as f32,
                yaw_jitter: plan.yaw_jitter as f32,
                pixels: quantize_image(&img),
            }
        })
        .collect()
}

/// Horizontally mirrored copy: flipped pixels, swapped turn label, negated
/// lateral offset and yaw jitter.
pub fn mirror_sample(s: &Sample, width: usize, height: usize, channels: usize) -> Sample {
    Sample {
        label: s.label.mirrored(),
        domain_id: s.domain_id,
        s: s.s,
        lateral: -s.lateral,
        yaw_jitter: -s.yaw_jitter,
        pixels: flip_bytes(&s.pixels, width, height, channels),
    }
}

// --- FTDS container ---------------------------------------------------------

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), DataError> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DataError::Format { offset: at, what: format!("unexpected end of file in {what}") }
            } else {
                DataError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32, DataError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

pub fn write_ftds(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FTDS_MAGIC)?;
    w.write_all(&FTDS_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.width as u16).to_le_bytes())?;
    w.write_all(&(ds.height as u16).to_le_bytes())?;
    w.write_all(&[ds.channels as u8])?;
    let expect = ds.pixel_count();
    for s in &ds.samples {
        assert_eq!(s.pixels.len(), expect, "sample pixel buffer mismatch");
        w.write_all(&[s.label.to_u8()])?;
        w.write_all(&s.domain_id.to_le_bytes())?;
        w.write_all(&s.s.to_le_bytes())?;
        w.write_all(&s.lateral.to_le_bytes())?;
        w.write_all(&s.yaw_jitter.to_le_bytes())?;
        w.write_all(&s.pixels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ftds(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut r = CountingReader::new(std::io::BufReader::new(file));

    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != FTDS_MAGIC {
        return Err(DataError::Format { offset: 0, what: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != FTDS_VERSION {
        return Err(DataError::Format {
            offset: 4,
            what: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("count")?;
    let width = r.u16("width")? as usize;
    let height = r.u16("height")? as usize;
    let channels = r.u8("channels")? as usize;
    if width == 0 || height == 0 || !(1..=4).contains(&channels) {
        return Err(DataError::Format {
            offset: 16,
            what: format!("bad geometry {width}x{height}x{channels}"),
        });
    }

    let pixel_count = width * height * channels;
    let mut ds = Dataset::new(width, height, channels);
    ds.samples.reserve(count.min(1 << 24) as usize);
    for _ in 0..count {
        let label_at = r.offset;
        let label_raw = r.u8("label")?;
        let label = Label::from_u8(label_raw).ok_or_else(|| DataError::Format {
            offset: label_at,
            what: format!("invalid label {label_raw}"),
        })?;
        let domain_id = r.u16("domain id")?;
        let s = r.f32("arc length")?;
        let lateral = r.f32("lateral")?;
        let yaw_jitter = r.f32("yaw jitter")?;
        let mut pixels = vec![0u8; pixel_count];
        r.fill(&mut pixels, "pixels")?;
        ds.samples.push(Sample { label, domain_id, s, lateral, yaw_jitter, pixels });
    }
    Ok(ds)
}
