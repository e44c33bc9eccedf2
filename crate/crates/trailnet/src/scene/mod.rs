//! Procedural trail worlds: a smooth bounded-curvature trail on a flat
//! forest floor, trees scattered off-trail, season/light/terrain appearance
//! factors, and an optional "reality proxy" degradation (blur + pixel noise
//! + palette jitter) that stands in for a second rendering stack.
//!
//! Everything is a pure function of (spec, seed), and a world can be mirrored
//! about the trail axis exactly — the renderer is written so that the mirrored
//! world produces the horizontally flipped image bit-for-bit.

mod palette;
pub mod render;

pub use palette::{luminance, resolve as resolve_palette, Palette, PALETTE_TABLE_TEXT};
pub use render::{render, render_with_mask, Image, PixelKind};

use crate::rng::StreamKey;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("palette table line {line}: malformed entry")]
    PaletteParse { line: usize },
    #[error("arc length {s} outside trail [0, {length}]")]
    ArcOutOfRange { s: f64, length: f64 },
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Season {
    Spring,
    Summer,
    Autumn,
    Winter,
    Snow,
}

impl Season {
    pub const ALL: [Season; 5] = [
        Season::Spring,
        Season::Summer,
        Season::Autumn,
        Season::Winter,
        Season::Snow,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
            Season::Winter => "winter",
            Season::Snow => "snow",
        }
    }

    pub fn from_token(t: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.token() == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Light {
    Morning,
    Dusk,
}

impl Light {
    pub fn token(self) -> &'static str {
        match self {
            Light::Morning => "morning",
            Light::Dusk => "dusk",
        }
    }

    pub fn from_token(t: &str) -> Option<Self> {
        match t {
            "morning" => Some(Light::Morning),
            "dusk" => Some(Light::Dusk),
            _ => None,
        }
    }
}

/// Trail style. `Trail2` is a rougher variant: tighter curves, a higher
/// camera mount, and a rockier trail surface (grayer, coarser speckle).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terrain {
    Trail1,
    Trail2,
}

impl Terrain {
    pub fn token(self) -> &'static str {
        match self {
            Terrain::Trail1 => "t1",
            Terrain::Trail2 => "t2",
        }
    }

    pub fn from_token(t: &str) -> Option<Self> {
        match t {
            "t1" => Some(Terrain::Trail1),
            "t2" => Some(Terrain::Trail2),
            _ => None,
        }
    }

    pub fn curvature_scale(self) -> f64 {
        match self {
            Terrain::Trail1 => 1.0,
            Terrain::Trail2 => 2.2,
        }
    }

    pub fn height_scale(self) -> f64 {
        match self {
            Terrain::Trail1 => 1.0,
            Terrain::Trail2 => 1.75,
        }
    }

    /// Multiplicative speckle amplitude on trail pixels. Packed dirt is
    /// nearly uniform; the rocky variant is visibly mottled.
    pub fn trail_speckle(self) -> f64 {
        match self {
            Terrain::Trail1 => 0.06,
            Terrain::Trail2 => 0.28,
        }
    }

    /// Trail surface color for a season's base trail color. The rocky
    /// variant goes fully gray at equal luminance, so the
    /// trail-brighter-than-ground contrast survives in every season.
    pub fn trail_color(self, base: [f64; 3]) -> [f64; 3] {
        match self {
            Terrain::Trail1 => base,
            Terrain::Trail2 => {
                let l = luminance(base);
                [l, l, l]
            }
        }
    }
}

/// Base camera height above ground for `Trail1`, meters.
pub const BASE_CAMERA_HEIGHT: f64 = 2.0;
/// Default downward camera pitch, radians.
pub const DEFAULT_PITCH: f64 = -0.10;

/// Full description of a rendering domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    /// Tag written into datasets so samples stay attributable.
    pub domain_id: u16,
    pub season: Season,
    pub light: Light,
    pub terrain: Terrain,
    /// Degraded second rendering stack: palette jitter + blur + pixel noise.
    pub reality_proxy: bool,
    /// Additive Gaussian pixel noise sigma (proxy only). Must be >= 0.
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels (proxy only). Must be >= 0.
    pub blur_radius: f64,
    /// Max fractional per-channel palette perturbation (proxy only), in [0, 0.5].
    pub palette_jitter: f64,
}

impl DomainSpec {
    pub fn new(
        domain_id: u16,
        season: Season,
        light: Light,
        terrain: Terrain,
    ) -> Self {
        DomainSpec {
            domain_id,
            season,
            light,
            terrain,
            reality_proxy: false,
            noise_sigma: 0.0,
            blur_radius: 0.0,
            palette_jitter: 0.0,
        }
    }

    /// Same domain rendered through the proxy stack with default degradation.
    pub fn with_proxy(mut self) -> Self {
        self.reality_proxy = true;
        self.noise_sigma = 0.08;
        self.blur_radius = 1.0;
        self.palette_jitter = 0.10;
        self
    }

    pub fn camera_height(&self) -> f64 {
        BASE_CAMERA_HEIGHT * self.terrain.height_scale()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(SceneError::InvalidSpec(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !self.blur_radius.is_finite() || self.blur_radius < 0.0 {
            return Err(SceneError::InvalidSpec(format!(
                "blur_radius must be >= 0, got {}",
                self.blur_radius
            )));
        }
        if !self.palette_jitter.is_finite() || !(0.0..=0.5).contains(&self.palette_jitter) {
            return Err(SceneError::InvalidSpec(format!(
                "palette_jitter must be in [0, 0.5], got {}",
                self.palette_jitter
            )));
        }
        Ok(())
    }

    /// Short token like `summer-t1-morning` or `winter-t2-dusk-proxy`,
    /// matching the config-file syntax.
    pub fn token(&self) -> String {
        let mut t = format!(
            "{}-{}-{}",
            self.season.token(),
            self.terrain.token(),
            self.light.token()
        );
        if self.reality_proxy {
            t.push_str("-proxy");
        }
        t
    }

    /// Inverse of `token`; proxy tokens get the default degradation stack.
    /// The caller supplies the domain id (tokens do not carry one).
    pub fn from_token(tok: &str, domain_id: u16) -> Result<Self, SceneError> {
        let parts: Vec<&str> = tok.split('-').collect();
        let bad = || SceneError::InvalidSpec(format!("unrecognized domain token `{tok}`"));
        let (core, proxy) = match parts.as_slice() {
            [s, t, l] => ([*s, *t, *l], false),
            [s, t, l, "proxy"] => ([*s, *t, *l], true),
            _ => return Err(bad()),
        };
        let season = Season::from_token(core[0]).ok_or_else(bad)?;
        let terrain = Terrain::from_token(core[1]).ok_or_else(bad)?;
        let light = Light::from_token(core[2]).ok_or_else(bad)?;
        let spec = DomainSpec::new(domain_id, season, light, terrain);
        Ok(if proxy { spec.with_proxy() } else { spec })
    }
}

/// One centerline sample, spaced `ARC_STEP` apart in arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSample {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, unwrapped (no modular reduction) so interpolation
    /// is safe.
    pub heading: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    /// Trunk radius, meters.
    pub girth: f64,
    pub color: [f64; 3],
}

/// Interpolated trail state at an arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrailFrame {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub half_width: f64,
}

/// Closest-point query result against the centerline polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint {
    pub s: f64,
    /// Signed lateral offset: positive to the left of the trail direction.
    pub lateral: f64,
    pub half_width: f64,
}

/// Centerline spacing in meters.
pub const ARC_STEP: f64 = 0.5;
/// Curvature bound for `Trail1`, rad/m; `Trail2` scales it up.
pub const BASE_MAX_CURVATURE: f64 = 0.08;
/// Trees per meter of trail (both sides together).
const TREE_DENSITY: f64 = 0.8;
/// Extra clearance between trunk edge and trail edge, meters.
const TREE_CLEARANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrailWorld {
    pub seed: u64,
    pub spec: DomainSpec,
    pub centerline: Vec<CenterSample>,
    pub trees: Vec<Tree>,
    pub palette: Palette,
    /// Keys for position-hashed render textures; preserved by mirroring so a
    /// mirrored world shows the same (flipped) speckle and pixel noise.
    pub(crate) speckle_key: StreamKey,
    pub(crate) noise_key: StreamKey,
}

/// Build a world deterministically from (spec, seed, length). The centerline
/// starts at the origin heading along +x; per-step turn is bounded by the
/// terrain's curvature limit, and the half width wanders slowly around 1.5 m.
pub fn build_world(spec: &DomainSpec, seed: u64, length: f64) -> TrailWorld {
    debug_assert!(spec.validate().is_ok());
    assert!(length > ARC_STEP, "trail length must exceed one step");

    let base = palette::resolve(spec.season, spec.light);
    let palette = if spec.reality_proxy && spec.palette_jitter > 0.0 {
        palette::jitter(&base, spec.palette_jitter, &StreamKey::new(seed, "palette"))
    } else {
        base
    };

    let kappa_max = BASE_MAX_CURVATURE * spec.terrain.curvature_scale();
    let steps = (length / ARC_STEP).ceil() as usize;

    let mut curve = StreamKey::new(seed, "centerline").stream();
    let mut width = StreamKey::new(seed, "halfwidth").stream();
    let mut centerline = Vec::with_capacity(steps + 1);
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    let mut kappa = 0.0f64;
    let mut hw = 1.5f64;
    let rough = spec.terrain.curvature_scale();
    for _ in 0..=steps {
        centerline.push(CenterSample { x, y, heading, half_width: hw });
        kappa = (0.95 * kappa + 0.10 * kappa_max * curve.next_normal()).clamp(-kappa_max, kappa_max);
        heading += kappa * ARC_STEP;
        x += ARC_STEP * heading.cos();
        y += ARC_STEP * heading.sin();
        hw = (hw + 0.04 * (1.5 - hw) + 0.03 * rough * width.next_normal()).clamp(1.0, 2.2);
    }

    let mut world = TrailWorld {
        seed,
        spec: *spec,
        centerline,
        trees: Vec::new(),
        palette,
        speckle_key: StreamKey::new(seed, "speckle"),
        noise_key: StreamKey::new(seed, "pixel-noise"),
    };

    let target = (length * TREE_DENSITY).round() as usize;
    let mut trees = Vec::with_capacity(target);
    let mut rng = StreamKey::new(seed, "trees").stream();
    let mut attempts = 0usize;
    while trees.len() < target && attempts < 40 * target {
        attempts += 1;
        // Fixed draw order per attempt keeps the stream aligned across
        // accept/reject decisions.
        let s = rng.range_f64(0.0, world.total_length());
        let side = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        let band = rng.next_f64();
        let girth = rng.range_f64(0.15, 0.45);
        let height = rng.range_f64(4.0, 9.0);
        let tint = [rng.next_f64(), rng.next_f64(), rng.next_f64()];

        let f = world.trail_frame(s).expect("s sampled within range");
        let lat_min = f.half_width + girth + TREE_CLEARANCE;
        let lat = lat_min + band * (14.0 - lat_min);
        let (nx, ny) = (-f.heading.sin(), f.heading.cos());
        let (tx, ty) = (f.x + side * lat * nx, f.y + side * lat * ny);

        let near = world.nearest_centerline(tx, ty);
        if near.lateral.abs() < near.half_width + girth + TREE_CLEARANCE {
            continue;
        }
        let mut color = world.palette.foliage;
        for (c, u) in color.iter_mut().zip(tint) {
            *c = (*c * (0.75 + 0.5 * u)).clamp(0.0, 1.0);
        }
        trees.push(Tree { x: tx, y: ty, height, girth, color });
    }
    world.trees = trees;
    world
}

impl TrailWorld {
    pub fn total_length(&self) -> f64 {
        (self.centerline.len() - 1) as f64 * ARC_STEP
    }

    /// Linear interpolation along the centerline. Errors outside [0, length].
    pub fn trail_frame(&self, s: f64) -> Result<TrailFrame, SceneError> {
        let length = self.total_length();
        if !s.is_finite() || s < 0.0 || s > length {
            return Err(SceneError::ArcOutOfRange { s, length });
        }
        let scaled = s / ARC_STEP;
        let i = (scaled.floor() as usize).min(self.centerline.len() - 2);
        let t = scaled - i as f64;
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let lerp = |u: f64, v: f64| u + t * (v - u);
        Ok(TrailFrame {
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            heading: lerp(a.heading, b.heading),
            half_width: lerp(a.half_width, b.half_width),
        })
    }

    /// Closest point on the centerline polyline to (px, py), scanning all
    /// segments. Ties keep the lowest segment index.
    pub fn nearest_centerline(&self, px: f64, py: f64) -> NearestPoint {
        self.nearest_centerline_between(px, py, 0.0, self.total_length())
    }

    /// Like `nearest_centerline`, restricted to the segments overlapping the
    /// arc-length window [s_lo, s_hi]. A tracking loop passes a window around
    /// its previous arc position so nearby switchbacks cannot capture it.
    pub fn nearest_centerline_between(&self, px: f64, py: f64, s_lo: f64, s_hi: f64) -> NearestPoint {
        let last_seg = self.centerline.len() - 2;
        let lo = ((s_lo / ARC_STEP).floor().max(0.0) as usize).min(last_seg);
        let hi = ((s_hi / ARC_STEP).ceil().max(0.0) as usize).min(last_seg);
        let mut best = (f64::INFINITY, lo, 0.0f64);
        for i in lo..=hi {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                ((px - a.x) * dx + (py - a.y) * dy) / len2
            } else {
                0.0
            }
            .clamp(0.0, 1.0);
            let (cx, cy) = (a.x + t * dx, a.y + t * dy);
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            if d2 < best.0 {
                best = (d2, i, t);
            }
        }
        let (_, i, t) = best;
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        // Left of direction is positive: 2D cross product of direction with
        // the offset vector.
        let (cx, cy) = (a.x + t * dx, a.y + t * dy);
        let cross = dx * (py - cy) - dy * (px - cx);
        let dist = best.0.sqrt();
        let lateral = if cross >= 0.0 { dist } else { -dist };
        NearestPoint {
            s: (i as f64 + t) * ARC_STEP,
            lateral,
            half_width: a.half_width + t * (b.half_width - a.half_width),
        }
    }

    /// Reflect the world about the x axis (the trail's starting direction).
    /// Involution: mirroring twice restores the original. Texture keys are
    /// preserved, which together with the renderer's symmetric sampling makes
    /// mirrored renders exact horizontal flips.
    pub fn mirrored(&self) -> TrailWorld {
        let mut w = self.clone();
        for c in &mut w.centerline {
            c.y = -c.y;
            c.heading = -c.heading;
        }
        for t in &mut w.trees {
            t.y = -t.y;
        }
        w
    }
}

/// Camera state for rendering. Yaw follows the trail-heading convention
/// (counterclockwise from +x); pitch is negative-down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    /// Pose in the mirrored world that observes the mirrored scene.
    pub fn mirrored(&self) -> CameraPose {
        CameraPose { x: self.x, y: -self.y, height: self.height, yaw: -self.yaw, pitch: self.pitch }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec::new(1, Season::Summer, Light::Morning, Terrain::Trail1)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_world(&spec(), 9, 120.0);
        let b = build_world(&spec(), 9, 120.0);
        assert_eq!(a, b);
        let c = build_world(&spec(), 10, 120.0);
        assert_ne!(a.centerline, c.centerline);
    }

    #[test]
    fn curvature_stays_bounded() {
        for terrain in [Terrain::Trail1, Terrain::Trail2] {
            let mut sp = spec();
            sp.terrain = terrain;
            let w = build_world(&sp, 4, 200.0);
            let bound = BASE_MAX_CURVATURE * terrain.curvature_scale() * ARC_STEP + 1e-12;
            for pair in w.centerline.windows(2) {
                assert!((pair[1].heading - pair[0].heading).abs() <= bound);
            }
        }
    }

    #[test]
    fn half_width_in_range() {
        let w = build_world(&spec(), 5, 200.0);
        for c in &w.centerline {
            assert!((1.0..=2.2).contains(&c.half_width));
        }
    }

    #[test]
    fn trees_clear_the_trail() {
        let w = build_world(&spec(), 6, 200.0);
        assert!(w.trees.len() >= 140, "only {} trees placed", w.trees.len());
        for t in &w.trees {
            let near = w.nearest_centerline(t.x, t.y);
            assert!(near.lateral.abs() >= near.half_width + t.girth);
        }
    }

    #[test]
    fn trail_frame_interpolates_and_bounds() {
        let w = build_world(&spec(), 7, 60.0);
        let f0 = w.trail_frame(0.0).unwrap();
        assert_eq!((f0.x, f0.y), (0.0, 0.0));
        let end = w.trail_frame(w.total_length()).unwrap();
        assert!(end.x.is_finite());
        assert!(w.trail_frame(-0.1).is_err());
        assert!(w.trail_frame(w.total_length() + 0.1).is_err());
        // Midpoint of a step interpolates between its neighbours.
        let fa = w.trail_frame(1.0).unwrap();
        let fb = w.trail_frame(1.5).unwrap();
        let fm = w.trail_frame(1.25).unwrap();
        assert!((fm.x - 0.5 * (fa.x + fb.x)).abs() < 1e-12);
    }

    #[test]
    fn mirror_is_involution() {
        let w = build_world(&spec(), 8, 80.0);
        assert_eq!(w.mirrored().mirrored(), w);
        let m = w.mirrored();
        assert_eq!(m.centerline[10].y, -w.centerline[10].y);
        assert_eq!(m.centerline[10].heading, -w.centerline[10].heading);
    }

    #[test]
    fn nearest_centerline_signs() {
        let w = build_world(&spec(), 1, 40.0);
        // Near the start the trail heads along +x, so +y is to the left.
        let left = w.nearest_centerline(2.0, 0.8);
        let right = w.nearest_centerline(2.0, -0.8);
        assert!(left.lateral > 0.0);
        assert!(right.lateral < 0.0);
        assert!((left.lateral.abs() - right.lateral.abs()).abs() < 0.3);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        assert!(s.validate().is_ok());
        s.noise_sigma = -0.1;
        assert!(s.validate().is_err());
        s.noise_sigma = 0.0;
        s.palette_jitter = 0.6;
        assert!(s.validate().is_err());
    }
}
