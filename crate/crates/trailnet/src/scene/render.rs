//! Pinhole renderer for trail worlds.
//!
//! The image pipeline is: ground/sky shading with position-hashed speckle,
//! billboard trees painted back to front, light tint, then (reality proxy
//! only) Gaussian blur and additive pixel noise, then a clamp to [0, 1].
//!
//! Every stage is written to commute exactly with horizontal mirroring:
//! trig is evaluated on |yaw| so sin/cos pick up the sign algebraically,
//! speckle and noise are keyed on mirror-invariant coordinates, and the blur
//! adds symmetric taps pairwise. Rendering a mirrored world from a mirrored
//! pose therefore yields the bitwise horizontal flip of the original render —
//! which is what justifies training on flipped images with swapped labels.

use std::io::Write as _;
use std::path::Path;

use crate::rng::StreamKey;

use super::{CameraPose, TrailWorld};

/// Horizontal field of view, radians.
pub const FOV: f64 = 1.5;
/// Far limit for ground and trees, meters; beyond it everything fades into
/// the horizon color.
pub const FAR: f64 = 60.0;
const NEAR: f64 = 0.5;
const BARK: [f64; 3] = [0.28, 0.22, 0.16];
/// Ground speckle cell size, meters.
const SPECKLE_CELL: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelKind {
    Sky,
    Ground,
    Trail,
    Tree,
}

/// RGB image with f64 channels in [0, 1], row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i] = v[0];
        self.pixels[i + 1] = v[1];
        self.pixels[i + 2] = v[2];
    }

    /// Horizontal flip (left-right), returning a new image.
    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / self.pixels.len() as f64
    }

    /// Binary PPM (P6) export with 8-bit channels.
    pub fn write_ppm(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height)?;
        buf.extend(self.pixels.iter().map(|v| quantize(*v)));
        std::fs::write(path, buf)
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// cos/sin of an angle, evaluated on |angle| with the sine sign restored
/// algebraically so that dir(-a) is the exact negation-in-sin of dir(a).
#[inline]
fn sym_dir(angle: f64) -> (f64, f64) {
    let a = angle.abs();
    let s = a.sin();
    (a.cos(), if angle.is_sign_negative() { -s } else { s })
}

/// Noise key specific to (world, pose, size), invariant under mirroring.
fn pose_noise_key(world: &TrailWorld, pose: &CameraPose, w: usize, h: usize) -> StreamKey {
    world
        .noise_key
        .derive(pose.x.to_bits())
        .derive(pose.y.abs().to_bits())
        .derive(pose.yaw.abs().to_bits())
        .derive(pose.height.to_bits())
        .derive(pose.pitch.to_bits())
        .derive(((w as u64) << 32) | h as u64)
}

struct Seg {
    ax: f64,
    ay: f64,
    dx: f64,
    dy: f64,
    inv_len2: f64,
    hw_a: f64,
    hw_b: f64,
}

pub fn render(world: &TrailWorld, pose: &CameraPose, width: usize, height: usize) -> Image {
    render_with_mask(world, pose, width, height).0
}

pub fn render_with_mask(
    world: &TrailWorld,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> (Image, Vec<PixelKind>) {
    assert!(width > 0 && height > 0);
    let w = width;
    let h = height;
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    let f = half_w / (FOV / 2.0).tan();

    let (cy, sy) = sym_dir(pose.yaw);
    let (cp, sp) = (pose.pitch.cos(), pose.pitch.sin());
    let fwd = [cp * cy, cp * sy, sp];
    let right = [sy, -cy, 0.0];
    let up = [-sp * cy, -sp * sy, cp];
    let (px, py, hz) = (pose.x, pose.y, pose.height);

    // Candidate centerline segments within draw range of the camera.
    let reach2 = (FAR + 5.0) * (FAR + 5.0);
    let mut segs = Vec::new();
    for i in 0..world.centerline.len() - 1 {
        let a = world.centerline[i];
        let b = world.centerline[i + 1];
        let (mx, my) = (0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
        if (mx - px) * (mx - px) + (my - py) * (my - py) <= reach2 {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            segs.push(Seg {
                ax: a.x,
                ay: a.y,
                dx,
                dy,
                inv_len2: if len2 > 0.0 { 1.0 / len2 } else { 0.0 },
                hw_a: a.half_width,
                hw_b: b.half_width,
            });
        }
    }

    let pal = &world.palette;
    let trail_base = world.spec.terrain.trail_color(pal.trail);
    let trail_amp = world.spec.terrain.trail_speckle();
    let mut img = Image::new(w, h);
    let mut mask = vec![PixelKind::Sky; w * h];

    for r in 0..h {
        let ny = (half_h - (r as f64 + 0.5)) / f;
        for c in 0..w {
            let nx = ((c as f64 + 0.5) - half_w) / f;
            let d = [
                fwd[0] + nx * right[0] + ny * up[0],
                fwd[1] + nx * right[1] + ny * up[1],
                fwd[2] + ny * up[2],
            ];
            let (color, kind) = if d[2] < -1e-12 {
                let t = hz / -d[2];
                if t <= FAR {
                    let gx = px + t * d[0];
                    let gy = py + t * d[1];
                    // Closest candidate segment; ties keep the first.
                    let mut best = (f64::INFINITY, 0.0f64, 0usize);
                    for (i, s) in segs.iter().enumerate() {
                        let rx = gx - s.ax;
                        let ry = gy - s.ay;
                        let tt = ((rx * s.dx + ry * s.dy) * s.inv_len2).clamp(0.0, 1.0);
                        let ex = rx - tt * s.dx;
                        let ey = ry - tt * s.dy;
                        let d2 = ex * ex + ey * ey;
                        if d2 < best.0 {
                            best = (d2, tt, i);
                        }
                    }
                    let (d2, tt, i) = best;
                    let hw = if segs.is_empty() {
                        0.0
                    } else {
                        segs[i].hw_a + tt * (segs[i].hw_b - segs[i].hw_a)
                    };
                    let on_trail = d2 <= hw * hw;
                    let (base, amp) =
                        if on_trail { (trail_base, trail_amp) } else { (pal.ground, 0.12) };
                    let qx = (gx / SPECKLE_CELL).floor() as i64;
                    let qy = (gy.abs() / SPECKLE_CELL).floor() as i64;
                    let speck = 1.0 + amp * (2.0 * world.speckle_key.f64_at2(qx, qy) - 1.0);
                    let fog = (t / FAR) * (t / FAR);
                    let mut col = [0.0; 3];
                    for ch in 0..3 {
                        let v = base[ch] * speck;
                        col[ch] = v + (pal.sky_horizon[ch] - v) * fog;
                    }
                    (col, if on_trail { PixelKind::Trail } else { PixelKind::Ground })
                } else {
                    (pal.sky_horizon, PixelKind::Sky)
                }
            } else {
                let tu = (d[2] * 2.5).clamp(0.0, 1.0);
                let mut col = [0.0; 3];
                for ch in 0..3 {
                    col[ch] = pal.sky_horizon[ch] + (pal.sky[ch] - pal.sky_horizon[ch]) * tu;
                }
                (col, PixelKind::Sky)
            };
            img.set(r, c, color);
            mask[r * w + c] = kind;
        }
    }

    // Trees as billboards, painted far to near. Forward distance is taken at
    // the trunk base; ties keep the build order, which mirroring preserves.
    let mut order: Vec<(f64, usize)> = Vec::new();
    for (i, t) in world.trees.iter().enumerate() {
        let rel = [t.x - px, t.y - py, -hz];
        let u0 = rel[0] * fwd[0] + rel[1] * fwd[1] + rel[2] * fwd[2];
        if u0 > NEAR && u0 <= FAR {
            order.push((u0, i));
        }
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));

    for (u0, i) in order {
        let t = &world.trees[i];
        let rel = [t.x - px, t.y - py, -hz];
        let s_r = rel[0] * right[0] + rel[1] * right[1];
        let s_u = rel[0] * up[0] + rel[1] * up[1] + rel[2] * up[2];
        let canopy_z = 0.7 * t.height;
        let s_u_canopy = s_u + canopy_z * up[2];
        let scale = f / u0;
        let xc = scale * s_r;
        let yb = scale * s_u;
        let yc = scale * s_u_canopy;
        let radius = scale * (t.girth * 4.5).clamp(1.0, 3.0);
        let trunk_hw = scale * t.girth;

        let fog = ((u0 / FAR) * (u0 / FAR)).clamp(0.0, 1.0);
        let mut canopy_col = [0.0; 3];
        let mut bark_col = [0.0; 3];
        for ch in 0..3 {
            canopy_col[ch] = t.color[ch] + (pal.sky_horizon[ch] - t.color[ch]) * fog;
            bark_col[ch] = BARK[ch] + (pal.sky_horizon[ch] - BARK[ch]) * fog;
        }

        let ext = radius.max(trunk_hw);
        let c_lo = ((half_w + xc - ext - 1.0).floor().max(0.0)) as usize;
        let c_hi = ((half_w + xc + ext + 1.0).ceil().min(w as f64 - 1.0)) as usize;
        let py_max = yc + radius;
        let py_min = yb.min(yc - radius);
        let r_lo = ((half_h - py_max - 1.0).floor().max(0.0)) as usize;
        let r_hi = ((half_h - py_min + 1.0).ceil().min(h as f64 - 1.0)) as usize;
        if c_lo > c_hi || r_lo > r_hi {
            continue;
        }
        for r in r_lo..=r_hi {
            let pix_y = half_h - (r as f64 + 0.5);
            for c in c_lo..=c_hi {
                let pix_x = (c as f64 + 0.5) - half_w;
                let ddx = pix_x - xc;
                let ddy = pix_y - yc;
                if ddx * ddx + ddy * ddy <= radius * radius {
                    img.set(r, c, canopy_col);
                    mask[r * w + c] = PixelKind::Tree;
                } else if ddx.abs() <= trunk_hw && pix_y >= yb && pix_y <= yc {
                    img.set(r, c, bark_col);
                    mask[r * w + c] = PixelKind::Tree;
                }
            }
        }
    }

    // Light tint.
    for p in img.pixels.chunks_mut(3) {
        for ch in 0..3 {
            p[ch] *= pal.tint[ch];
        }
    }

    if world.spec.reality_proxy {
        if world.spec.blur_radius > 0.0 {
            blur(&mut img, world.spec.blur_radius);
        }
        if world.spec.noise_sigma > 0.0 {
            let key = pose_noise_key(world, pose, w, h);
            let sigma = world.spec.noise_sigma;
            for r in 0..h {
                for c in 0..w {
                    // Mirror twins share draws via the symmetric column index.
                    let c_sym = c.min(w - 1 - c) as u64;
                    let idx = ((r as u64 * w as u64) + c_sym) * 3;
                    let mut v = img.get(r, c);
                    for ch in 0..3 {
                        v[ch] += sigma * key.normal_at(idx + ch as u64);
                    }
                    img.set(r, c, v);
                }
            }
        }
    }

    for p in img.pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }

    (img, mask)
}

/// Separable Gaussian blur with clamped edges. Taps are accumulated as
/// center + weighted symmetric pairs so the pass commutes with mirroring.
fn blur(img: &mut Image, sigma: f64) {
    let half = ((2.0 * sigma).ceil() as usize).clamp(1, 4);
    let mut weights = vec![0.0; half + 1];
    for (k, wk) in weights.iter_mut().enumerate() {
        *wk = (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
    }
    let total = weights[0] + 2.0 * weights[1..].iter().sum::<f64>();
    for wk in weights.iter_mut() {
        *wk /= total;
    }

    let (w, h) = (img.width, img.height);
    let mut tmp = img.clone();
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0; 3];
            let center = img.get(r, c);
            for ch in 0..3 {
                acc[ch] = weights[0] * center[ch];
            }
            for (k, wk) in weights.iter().enumerate().skip(1) {
                let a = img.get(r, c.saturating_sub(k));
                let b = img.get(r, (c + k).min(w - 1));
                for ch in 0..3 {
                    acc[ch] += wk * (a[ch] + b[ch]);
                }
            }
            tmp.set(r, c, acc);
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = [0.0; 3];
            let center = tmp.get(r, c);
            for ch in 0..3 {
                acc[ch] = weights[0] * center[ch];
            }
            for (k, wk) in weights.iter().enumerate().skip(1) {
                let a = tmp.get(r.saturating_sub(k), c);
                let b = tmp.get((r + k).min(h - 1), c);
                for ch in 0..3 {
                    acc[ch] += wk * (a[ch] + b[ch]);
                }
            }
            img.set(r, c, acc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_world, DomainSpec, Light, Season, Terrain, DEFAULT_PITCH};

    fn world(proxy: bool) -> TrailWorld {
        let mut spec = DomainSpec::new(0, Season::Summer, Light::Morning, Terrain::Trail1);
        if proxy {
            spec = spec.with_proxy();
        }
        build_world(&spec, 33, 120.0)
    }

    fn pose_on(world: &TrailWorld, s: f64) -> CameraPose {
        let f = world.trail_frame(s).unwrap();
        CameraPose {
            x: f.x,
            y: f.y + 0.3,
            height: world.spec.camera_height(),
            yaw: f.heading - 0.2,
            pitch: DEFAULT_PITCH,
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let w = world(true);
        let p = pose_on(&w, 8.0);
        let a = render(&w, &p, 24, 24);
        let b = render(&w, &p, 24, 24);
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mirrored_world_renders_exact_flip() {
        for proxy in [false, true] {
            let w = world(proxy);
            let p = pose_on(&w, 12.0);
            let direct = render(&w, &p, 32, 24);
            let flipped = render(&w.mirrored(), &p.mirrored(), 32, 24).hflip();
            assert_eq!(direct.pixels, flipped.pixels, "proxy={proxy}");
        }
    }

    #[test]
    fn mask_has_expected_structure() {
        let w = world(false);
        let p = pose_on(&w, 10.0);
        let (_, mask) = render_with_mask(&w, &p, 32, 32);
        let count = |k: PixelKind| mask.iter().filter(|m| **m == k).count();
        assert!(count(PixelKind::Trail) > 20, "trail barely visible");
        assert!(count(PixelKind::Ground) > 50);
        assert!(count(PixelKind::Sky) > 20);
        assert!(count(PixelKind::Tree) > 10);
        // Top row is sky or tree canopy, never ground.
        for c in 0..32 {
            assert_ne!(mask[c], PixelKind::Ground);
            assert_ne!(mask[c], PixelKind::Trail);
        }
    }

    #[test]
    fn noise_sigma_shifts_pixels_by_expected_amount() {
        // Mean absolute difference between noise 0.1 and noise 0 renders of
        // an otherwise identical proxy domain.
        let mut spec = DomainSpec::new(0, Season::Summer, Light::Morning, Terrain::Trail1);
        spec.reality_proxy = true;
        spec.noise_sigma = 0.1;
        let noisy = build_world(&spec, 5, 80.0);
        spec.noise_sigma = 0.0;
        let clean = build_world(&spec, 5, 80.0);
        let p = pose_on(&clean, 6.0);
        let a = render(&noisy, &p, 32, 32);
        let b = render(&clean, &p, 32, 32);
        let mad = a.mean_abs_diff(&b);
        assert!((0.05..=0.12).contains(&mad), "mad {mad}");
    }

    #[test]
    fn ppm_roundtrip_header() {
        let w = world(false);
        let img = render(&w, &pose_on(&w, 5.0), 16, 12);
        let dir = std::env::temp_dir().join("trailnet-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame.ppm");
        img.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n16 12\n255\n"));
        assert_eq!(bytes.len(), 13 + 16 * 12 * 3);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn hflip_is_involution() {
        let w = world(true);
        let img = render(&w, &pose_on(&w, 9.0), 17, 11);
        assert_eq!(img.hflip().hflip(), img);
    }
}
