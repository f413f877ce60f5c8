//! Training-time augmentation: horizontal flip, color jitter and small
//! rotations, each applied independently with its own probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_color: f64,
    pub p_rotate: f64,
    /// Brightness, contrast and saturation factors are drawn from this range.
    pub jitter: (f32, f32),
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_color: 0.5,
            p_rotate: 0.5,
            jitter: (0.8, 1.2),
            max_rotation_deg: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_color: 0.0,
            p_rotate: 0.0,
            ..Default::default()
        }
    }
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            for x in (0..w).rev() {
                out.push(d[ch * h * w + y * w + x]);
            }
        }
    }
    Tensor::new(s, out).expect("same size")
}

fn color_jitter(img: &Tensor<f32>, brightness: f32, contrast: f32, saturation: f32) -> Tensor<f32> {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    let gray = |i: usize, d: &[f32]| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    let mut out: Vec<f32> = d.iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean_gray = (0..plane).map(|i| gray(i, &out)).sum::<f32>() / plane as f32;
    for v in out.iter_mut() {
        *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0);
    }
    for i in 0..plane {
        let g = gray(i, &out);
        for c in 0..3 {
            let v = &mut out[c * plane + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    Tensor::new(s, out).expect("same size")
}

/// Rotates about the image centre with bilinear sampling; coordinates
/// falling outside are clamped to the border.
pub fn rotate(t: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let d = t.data();
    let mut out = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(s, out).expect("same size")
}

fn binarize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Augments an image/mask pair deterministically from `seed`. Masks stay
/// binary; a rotation that would empty the mask is skipped.
pub fn augment(image: &Tensor<f32>, gt: &Tensor<f32>, cfg: &AugmentConfig, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (si, sg) = (image.shape(), gt.shape());
    if si.len() != 3 || si[0] != 3 || sg.len() != 3 || sg[0] != 1 || si[1..] != sg[1..] {
        return Err(shape_err!("augment: image {:?} and mask {:?} do not pair", si, sg));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    let mut mask = gt.clone();
    // Draw every variate up front so each transform's randomness is fixed
    // regardless of which others fire.
    let flip = rng.gen_bool(cfg.p_flip);
    let color = rng.gen_bool(cfg.p_color);
    let (lo, hi) = cfg.jitter;
    let factors: [f32; 3] = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
    let rot = rng.gen_bool(cfg.p_rotate);
    let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);

    if flip {
        img = hflip(&img);
        mask = hflip(&mask);
    }
    if color {
        img = color_jitter(&img, factors[0], factors[1], factors[2]);
    }
    if rot {
        let rotated = binarize(&rotate(&mask, angle));
        if rotated.data().iter().any(|&v| v > 0.0) {
            img = rotate(&img, angle);
            mask = rotated;
        }
    }
    Ok((img, mask))
}
