//! Binary PPM overlays of a prediction against its reference on one slice.

use crate::error::{Error, Result};

pub const WINDOW: (f32, f32) = (-100.0, 400.0);
pub const TRUE_POSITIVE: [u8; 3] = [255, 255, 255];
pub const FALSE_POSITIVE: [u8; 3] = [255, 0, 0];
pub const FALSE_NEGATIVE: [u8; 3] = [255, 165, 0];

/// Maps HU in the display window to 0..=255, rounding half away from zero.
pub fn window_gray(hu: f32) -> u8 {
    let (lo, hi) = WINDOW;
    let t = ((hu as f64 - lo as f64) / (hi as f64 - lo as f64)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// P6 image: grayscale CT backdrop, TP white, FP red, FN orange.
pub fn render_overlay(gt: &[u8], pred: &[u8], image: &[f32], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let n = rows * cols;
    if gt.len() != n || pred.len() != n || image.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "overlay {rows}×{cols} needs {n} pixels, got gt {}, pred {}, image {}",
            gt.len(),
            pred.len(),
            image.len()
        )));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        let px = match (gt[i] != 0, pred[i] != 0) {
            (true, true) => TRUE_POSITIVE,
            (false, true) => FALSE_POSITIVE,
            (true, false) => FALSE_NEGATIVE,
            (false, false) => [window_gray(image[i]); 3],
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}
