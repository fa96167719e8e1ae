//! Depth colormap and semantic palette images.

use cosemdepth::geometry::IGNORE_LABEL;
use cosemdepth::{DepthMap, LabelMap, Tensor};

/// RGB colors of the seven target classes, indexed by class id:
///
/// | id | class    | color           |
/// |----|----------|-----------------|
/// | 0  | Sky      | (135, 206, 235) |
/// | 1  | Water    | (  0,  64, 255) |
/// | 2  | Land     | (160, 110,  50) |
/// | 3  | Trees    | ( 30, 140,  30) |
/// | 4  | Boulders | (128, 128, 128) |
/// | 5  | Road     | ( 60,  60,  60) |
/// | 6  | Others   | (220,  40, 200) |
///
/// Ignored and out-of-range labels are drawn black.
pub const PALETTE: [[u8; 3]; 7] = [
    [135, 206, 235],
    [0, 64, 255],
    [160, 110, 50],
    [30, 140, 30],
    [128, 128, 128],
    [60, 60, 60],
    [220, 40, 200],
];

/// Anchor colors of a viridis-like ramp, near to far.
const RAMP: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Ramp color for `t` in `[0, 1]`; values outside are clamped.
pub fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f)
}

pub fn class_color(label: u8) -> [f64; 3] {
    match PALETTE.get(label as usize) {
        Some(c) if label != IGNORE_LABEL => c.map(|v| v as f64 / 255.0),
        _ => [0.0; 3],
    }
}

/// Depth normalized by `cap` and mapped through the ramp; invalid pixels
/// are black.
pub fn colorize_depth(depth: &DepthMap, cap: f64) -> Tensor {
    let mut out = Tensor::zeros(3, depth.height, depth.width);
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(d) = depth.get(x, y) {
                for (c, v) in ramp(d / cap).into_iter().enumerate() {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    out
}

pub fn colorize_labels(labels: &LabelMap) -> Tensor {
    let mut out = Tensor::zeros(3, labels.height, labels.width);
    for y in 0..labels.height {
        for x in 0..labels.width {
            for (c, v) in class_color(labels.get(x, y)).into_iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// `alpha`-blend of the palette image over `image`.
pub fn overlay(image: &Tensor, labels: &LabelMap, alpha: f64) -> Tensor {
    let colors = colorize_labels(labels);
    Tensor::from_fn(3, labels.height, labels.width, |c, y, x| {
        (1.0 - alpha) * image.at(c, y, x) + alpha * colors.at(c, y, x)
    })
}
