//! Season/light color tables, loaded from the committed `palettes.txt`.

use crate::rng::StreamKey;

use super::{Light, SceneError, Season};

/// Raw table text; committed alongside the source so the colors are data,
/// not code.
pub const PALETTE_TABLE_TEXT: &str = include_str!("palettes.txt");

/// Resolved color set for one world. All channels in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub trail: [f64; 3],
    pub ground: [f64; 3],
    pub foliage: [f64; 3],
    pub sky: [f64; 3],
    pub sky_horizon: [f64; 3],
    /// Per-channel multiplier from the light condition, applied as the last
    /// shading step before the reality-proxy stages.
    pub tint: [f64; 3],
}

fn parse_table(text: &str) -> Result<Vec<(String, [f64; 3])>, SceneError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| SceneError::PaletteParse { line: lineno + 1 })?
            .to_string();
        let mut rgb = [0.0; 3];
        for v in rgb.iter_mut() {
            *v = it
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or(SceneError::PaletteParse { line: lineno + 1 })?;
            if !(0.0..=1.0).contains(v) {
                return Err(SceneError::PaletteParse { line: lineno + 1 });
            }
        }
        if it.next().is_some() {
            return Err(SceneError::PaletteParse { line: lineno + 1 });
        }
        out.push((name, rgb));
    }
    Ok(out)
}

fn lookup(table: &[(String, [f64; 3])], name: &str) -> [f64; 3] {
    table
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, c)| *c)
        .unwrap_or_else(|| panic!("palette table missing entry {name}"))
}

/// Look up the base palette for a season/light pair. Identical inputs always
/// return identical tables; jitter is applied separately per world.
pub fn resolve(season: Season, light: Light) -> Palette {
    let table = parse_table(PALETTE_TABLE_TEXT).expect("committed palette table is well-formed");
    let s = season.token();
    Palette {
        trail: lookup(&table, &format!("{s}.trail")),
        ground: lookup(&table, &format!("{s}.ground")),
        foliage: lookup(&table, &format!("{s}.foliage")),
        sky: lookup(&table, &format!("{s}.sky")),
        sky_horizon: lookup(&table, &format!("{s}.sky_horizon")),
        tint: lookup(&table, &format!("light.{}", light.token())),
    }
}

/// Apply per-channel multiplicative jitter of at most `amount` to the five
/// color entries (not the tint), clamping back into [0, 1]. Draws are taken
/// from `key` counters 0..15 so the result depends only on (key, amount).
pub fn jitter(p: &Palette, amount: f64, key: &StreamKey) -> Palette {
    let mut out = *p;
    let mut ctr = 0u64;
    let mut apply = |c: &mut [f64; 3]| {
        for v in c.iter_mut() {
            let u = key.f64_at(ctr);
            ctr += 1;
            *v = (*v * (1.0 + amount * (2.0 * u - 1.0))).clamp(0.0, 1.0);
        }
    };
    apply(&mut out.trail);
    apply(&mut out.ground);
    apply(&mut out.foliage);
    apply(&mut out.sky);
    apply(&mut out.sky_horizon);
    out
}

pub fn luminance(c: [f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}
