//! Random in-plane affine augmentation applied jointly to image and target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "d_rot")]
    pub max_rotation_deg: f64,
    /// Fraction of the slice extent.
    #[serde(default = "d_trans")]
    pub max_translate_frac: f64,
    #[serde(default = "d_zoom")]
    pub zoom_range: (f64, f64),
}

fn d_rot() -> f64 {
    10.0
}
fn d_trans() -> f64 {
    0.1
}
fn d_zoom() -> (f64, f64) {
    (0.9, 1.1)
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: false, max_rotation_deg: 10.0, max_translate_frac: 0.1, zoom_range: (0.9, 1.1) }
    }
}

impl AugmentConfig {
    pub fn enabled() -> Self {
        AugmentConfig { enabled: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("zoom range {:?} must satisfy 0 < low <= high", self.zoom_range)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translate_frac >= 0.0) {
            return Err(Error::InvalidConfig("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws one transform.
    pub fn sample(&self, rows: usize, cols: usize, rng: &mut impl Rng) -> AffineParams {
        let uniform = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angle = uniform(rng, self.max_rotation_deg).to_radians();
        let dy = uniform(rng, self.max_translate_frac) * rows as f64;
        let dx = uniform(rng, self.max_translate_frac) * cols as f64;
        let (lo, hi) = self.zoom_range;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        AffineParams { angle, translate: (dy, dx), zoom }
    }
}

/// Rotation (radians, counter-clockwise in row/col display), translation in
/// pixels and isotropic zoom, all about the slice centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle: f64,
    pub translate: (f64, f64),
    pub zoom: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { angle: 0.0, translate: (0.0, 0.0), zoom: 1.0 };
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

/// Warps image (bilinear) and target (nearest, re-binarized at 0.5).
/// Pixels mapped from outside the slice take `background` / 0.
pub fn apply_affine(
    image: &[f32],
    target: &[f32],
    rows: usize,
    cols: usize,
    p: &AffineParams,
    background: f32,
) -> (Vec<f32>, Vec<f32>) {
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let (s, c) = (snap(p.angle.sin()), snap(p.angle.cos()));
    let inv_zoom = 1.0 / p.zoom;
    let mut img = Vec::with_capacity(rows * cols);
    let mut tgt = Vec::with_capacity(rows * cols);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols;
    let pixel = |y: isize, x: isize| {
        if inside(y, x) {
            image[y as usize * cols + x as usize] as f64
        } else {
            background as f64
        }
    };
    for r in 0..rows {
        for col in 0..cols {
            // inverse map: output → source
            let oy = r as f64 - cy - p.translate.0;
            let ox = col as f64 - cx - p.translate.1;
            let sy = (c * oy + s * ox) * inv_zoom + cy;
            let sx = (-s * oy + c * ox) * inv_zoom + cx;
            let (sy, sx) = (snap(sy), snap(sx));

            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let mut v = pixel(y0, x0) * (1.0 - fy) * (1.0 - fx);
            if fx > 0.0 {
                v += pixel(y0, x0 + 1) * (1.0 - fy) * fx;
            }
            if fy > 0.0 {
                v += pixel(y0 + 1, x0) * fy * (1.0 - fx);
                if fx > 0.0 {
                    v += pixel(y0 + 1, x0 + 1) * fy * fx;
                }
            }
            img.push(v as f32);

            let (ny, nx) = (sy.round() as isize, sx.round() as isize);
            let t = if inside(ny, nx) { target[ny as usize * cols + nx as usize] } else { 0.0 };
            tgt.push(if t >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    (img, tgt)
}

/// Seeded random augmentation; identity when disabled.
pub fn augment(
    image: &[f32],
    target: &[f32],
    rows: usize,
    cols: usize,
    cfg: &AugmentConfig,
    background: f32,
    seed: u64,
) -> (Vec<f32>, Vec<f32>) {
    if !cfg.enabled {
        return (image.to_vec(), target.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.sample(rows, cols, &mut rng);
    apply_affine(image, target, rows, cols, &p, background)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> (Vec<f32>, Vec<f32>) {
        let img: Vec<f32> = (0..25).map(|i| (i * i % 17) as f32).collect();
        let tgt: Vec<f32> = [
            1, 1, 0, 0, 0, //
            1, 0, 0, 0, 0, //
            1, 0, 0, 1, 0, //
            0, 0, 0, 1, 1, //
            0, 0, 0, 0, 0,
        ]
        .iter()
        .map(|v| *v as f32)
        .collect();
        (img, tgt)
    }

    #[test]
    fn disabled_is_identity() {
        let (img, tgt) = pattern();
        let (a, b) = augment(&img, &tgt, 5, 5, &AugmentConfig::default(), -1.0, 4);
        assert_eq!((a, b), (img, tgt));
    }

    #[test]
    fn identity_transform() {
        let (img, tgt) = pattern();
        let (a, b) = apply_affine(&img, &tgt, 5, 5, &AffineParams::IDENTITY, -1.0);
        for (x, y) in a.iter().zip(&img) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(b, tgt);
    }

    #[test]
    fn quarter_turn_matches_index_rotation() {
        let (img, tgt) = pattern();
        let p = AffineParams { angle: std::f64::consts::FRAC_PI_2, ..AffineParams::IDENTITY };
        let (a, b) = apply_affine(&img, &tgt, 5, 5, &p, -1.0);
        // output (r, c) reads source (c, 4 − r)
        for r in 0..5 {
            for c in 0..5 {
                let src = c * 5 + (4 - r);
                assert_eq!(a[r * 5 + c], img[src]);
                assert_eq!(b[r * 5 + c], tgt[src]);
            }
        }
    }

    #[test]
    fn random_augmentation_keeps_binary_targets() {
        let (img, tgt) = pattern();
        let cfg = AugmentConfig::enabled();
        for seed in 0..50 {
            let (a, b) = augment(&img, &tgt, 5, 5, &cfg, -1.0, seed);
            assert_eq!(a.len(), 25);
            assert!(b.iter().all(|t| *t == 0.0 || *t == 1.0));
        }
        assert_eq!(augment(&img, &tgt, 5, 5, &cfg, -1.0, 8), augment(&img, &tgt, 5, 5, &cfg, -1.0, 8));
    }

    #[test]
    fn zoom_range_is_validated() {
        let bad = AugmentConfig { zoom_range: (1.2, 1.1), ..AugmentConfig::enabled() };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::enabled().validate().is_ok());
    }
}
