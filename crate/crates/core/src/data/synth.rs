//! Procedural co-saliency groups.
//!
//! Every group is one shape family. Each image shows one large instance of
//! the family (the ground truth) over a cluttered textured background with a
//! few smaller distractor shapes drawn from the other families.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io;
use crate::error::{contract_err, io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
    Hexagon,
    Crescent,
}

pub const FAMILIES: [Family; 8] = [
    Family::Circle,
    Family::Square,
    Family::Triangle,
    Family::Star,
    Family::Cross,
    Family::Ring,
    Family::Hexagon,
    Family::Crescent,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Circle => "circle",
            Family::Square => "square",
            Family::Triangle => "triangle",
            Family::Star => "star",
            Family::Cross => "cross",
            Family::Ring => "ring",
            Family::Hexagon => "hexagon",
            Family::Crescent => "crescent",
        }
    }

    /// Membership test in shape-local coordinates (unit radius).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Family::Circle => r2 <= 1.0,
            Family::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Family::Triangle => in_polygon(u, v, &regular_polygon(3, 1.0, 0.0)),
            Family::Star => in_polygon(u, v, &star_polygon()),
            Family::Cross => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
            Family::Ring => (0.3025..=1.0).contains(&r2),
            Family::Hexagon => in_polygon(u, v, &regular_polygon(6, 1.0, 0.0)),
            Family::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.75 * 0.75,
        }
    }
}

fn regular_polygon(n: usize, radius: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = phase - std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / n as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.45 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Even-odd point-in-polygon test.
fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub images_per_group: usize,
    pub size: usize,
    pub seed: u64,
    /// Largest fraction of the object's area that distractors may cover.
    pub occlusion_budget: f64,
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_groups: 6,
            images_per_group: 12,
            size: 64,
            seed: 0,
            occlusion_budget: 0.2,
            max_distractors: 3,
        }
    }
}

/// One rendered image with its object mask and the union of distractor
/// footprints.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub size: usize,
    /// Channel-major RGB in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub mask: Vec<bool>,
    pub distractors: Vec<bool>,
}

impl SynthSample {
    /// Fraction of object pixels covered by distractor footprints.
    pub fn occlusion(&self) -> f64 {
        let area = self.mask.iter().filter(|&&m| m).count();
        let overlap = self.mask.iter().zip(&self.distractors).filter(|(&m, &d)| m && d).count();
        overlap as f64 / area.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl Placement {
    fn covers(&self, family: Family, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if dx.abs() > self.radius * 1.01 || dy.abs() > self.radius * 1.01 {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        family.contains(u, v)
    }

    fn footprint(&self, family: Family, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.covers(family, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }

    fn random(rng: &mut impl Rng, size: f64, radius: (f64, f64)) -> Self {
        let radius = rng.gen_range(radius.0..radius.1) * size;
        let margin = radius * 0.9;
        Placement {
            cx: rng.gen_range(margin..size - margin),
            cy: rng.gen_range(margin..size - margin),
            radius,
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

fn vivid_color(rng: &mut impl Rng) -> [f32; 3] {
    let hue = rng.gen_range(0.0..6.0f32);
    let sector = hue.floor() as usize;
    let frac = hue - sector as f32;
    let (hi, lo) = (rng.gen_range(0.8..1.0f32), rng.gen_range(0.0..0.2f32));
    let mid_up = lo + (hi - lo) * frac;
    let mid_down = hi - (hi - lo) * frac;
    match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

fn paint(rgb: &mut [f32], size: usize, mask: &[bool], color: [f32; 3], stripes: Option<(f64, f64)>, rng: &mut impl Rng) {
    let plane = size * size;
    let shade = rng.gen_range(0.55..0.8f32);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let factor = match stripes {
            Some((freq, phase)) => {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                if ((x + y) * freq + phase).sin() > 0.0 {
                    1.0
                } else {
                    shade
                }
            }
            None => 1.0,
        };
        for c in 0..3 {
            rgb[c * plane + i] = color[c] * factor;
        }
    }
}

/// Renders one image whose object is an instance of `family`.
pub fn render_sample(family: Family, size: usize, occlusion_budget: f64, max_distractors: usize, rng: &mut impl Rng) -> SynthSample {
    let plane = size * size;
    let sz = size as f64;
    let mut rgb = vec![0.0f32; 3 * plane];

    // Muted background: a linear gradient plus low-frequency waves and noise.
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
    let (fx, fy, ph) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.3));
    for y in 0..size {
        for x in 0..size {
            let t = (x + y) as f32 / (2 * size) as f32;
            let wave = 0.08 * ((x as f64 * fx + y as f64 * fy + ph).sin() as f32);
            for c in 0..3 {
                let noise = rng.gen_range(-0.04..0.04f32);
                rgb[c * plane + y * size + x] = (base[c] + tint[c] * t + wave + noise).clamp(0.0, 1.0);
            }
        }
    }

    let object = Placement::random(rng, sz, (0.24, 0.36));
    let mask = object.footprint(family, size);
    let area = mask.iter().filter(|&&m| m).count().max(1);

    let others: Vec<Family> = FAMILIES.iter().copied().filter(|&f| f != family).collect();
    let n_distractors = rng.gen_range(1..=max_distractors.max(1));
    let mut distractors = vec![false; plane];
    for _ in 0..n_distractors {
        let kind = others[rng.gen_range(0..others.len())];
        for _ in 0..50 {
            let p = Placement::random(rng, sz, (0.1, 0.17));
            let fp = p.footprint(kind, size);
            let overlap = fp
                .iter()
                .zip(mask.iter().zip(&distractors))
                .filter(|(&f, (&m, &d))| m && (f || d))
                .count();
            if overlap as f64 <= occlusion_budget * area as f64 {
                let color = vivid_color(rng);
                paint(&mut rgb, size, &fp, color, None, rng);
                distractors.iter_mut().zip(&fp).for_each(|(d, &f)| *d |= f);
                break;
            }
        }
    }

    // The object is painted last so it stays intact on top of distractors.
    let color = vivid_color(rng);
    let stripes = rng.gen_bool(0.5).then(|| (rng.gen_range(0.4..1.2), rng.gen_range(0.0..6.3)));
    paint(&mut rgb, size, &mask, color, stripes, rng);

    SynthSample {
        size,
        rgb,
        mask,
        distractors,
    }
}

/// Seed of one image, derived from the run seed and its position.
pub fn image_seed(seed: u64, group: usize, index: usize) -> u64 {
    let mut z = seed ^ ((group as u64) << 32) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stem_for(family: Family, index: usize) -> String {
    format!("{}_{index:03}", family.name())
}

/// All samples of a configuration in memory, grouped by family.
pub fn render_all(cfg: &SynthConfig) -> Result<Vec<(Family, Vec<(String, u64, SynthSample)>)>> {
    if cfg.n_groups == 0 || cfg.n_groups > FAMILIES.len() {
        return Err(contract_err!("synth: n_groups must be in 1..={}", FAMILIES.len()));
    }
    if cfg.size == 0 || cfg.size % 32 != 0 {
        return Err(contract_err!("synth: size {} is not a positive multiple of 32", cfg.size));
    }
    if cfg.images_per_group == 0 || cfg.images_per_group % 2 != 0 {
        return Err(contract_err!("synth: images_per_group {} must be even and positive", cfg.images_per_group));
    }
    Ok(FAMILIES[..cfg.n_groups]
        .iter()
        .enumerate()
        .map(|(g, &family)| {
            let samples = (0..cfg.images_per_group)
                .map(|i| {
                    let seed = image_seed(cfg.seed, g, i);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let s = render_sample(family, cfg.size, cfg.occlusion_budget, cfg.max_distractors, &mut rng);
                    (stem_for(family, i), seed, s)
                })
                .collect();
            (family, samples)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub groups: usize,
    pub images: usize,
}

/// Writes `out_dir/images/<group>/<stem>.png`, `out_dir/gts/<group>/<stem>.png`
/// and `out_dir/manifest.tsv` (columns `group, stem, seed`).
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    let all = render_all(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = String::from("group\tstem\tseed\n");
    let mut images = 0;
    for (family, samples) in &all {
        let group = family.name();
        for (stem, seed, s) in samples {
            let img_path = out_dir.join("images").join(group).join(format!("{stem}.png"));
            let gt_path = out_dir.join("gts").join(group).join(format!("{stem}.png"));
            io::save_rgb(&img_path, s.size, s.size, &s.rgb)?;
            let gt: Vec<f64> = s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            io::save_gray(&gt_path, s.size, s.size, &gt)?;
            let _ = writeln!(manifest, "{group}\t{stem}\t{seed}");
            images += 1;
        }
    }
    let path = out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(SynthSummary {
        groups: all.len(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_nonempty_at_unit_scale() {
        for f in FAMILIES {
            let p = Placement { cx: 32.0, cy: 32.0, radius: 16.0, angle: 0.3 };
            assert!(p.footprint(f, 64).iter().filter(|&&m| m).count() > 100, "{f:?}");
        }
    }

    #[test]
    fn polygon_test() {
        let sq = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        assert!(in_polygon(0.0, 0.0, &sq));
        assert!(!in_polygon(1.5, 0.0, &sq));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SynthConfig { size: 48, ..Default::default() };
        assert!(render_all(&bad).is_err());
        let odd = SynthConfig { images_per_group: 3, ..Default::default() };
        assert!(render_all(&odd).is_err());
    }
}
