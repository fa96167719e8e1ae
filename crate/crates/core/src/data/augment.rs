use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{Frame, FrameSequenceSample};
use super::{DataError, Result};
use crate::geometry::{BilinearTaps, DepthMap, LabelMap, Se3, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Rotation about the optical axis is drawn from `±rotation_degrees`.
    pub rotation_degrees: f64,
    pub flip_probability: f64,
    /// Multiplicative factors are drawn from `1 ± range`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift range, in turns.
    pub hue: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 15.0,
            flip_probability: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl AugmentationConfig {
    /// All magnitudes zero.
    pub fn none() -> Self {
        Self {
            rotation_degrees: 0.0,
            flip_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.rotation_degrees,
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
        ];
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(DataError::Config("flip_probability must be in [0, 1]".into()));
        }
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(DataError::Config("augmentation ranges must be finite and non-negative".into()));
        }
        if self.brightness >= 1.0 || self.contrast >= 1.0 || self.saturation >= 1.0 {
            return Err(DataError::Config("jitter factor ranges must be below 1".into()));
        }
        Ok(())
    }

    /// Draws one set of transform parameters.
    pub fn sample(&self, rng: &mut impl Rng) -> AugmentParams {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        AugmentParams {
            rotation: sym(rng, self.rotation_degrees).to_radians(),
            flip: self.flip_probability > 0.0 && rng.gen_bool(self.flip_probability),
            brightness: 1.0 + sym(rng, self.brightness),
            contrast: 1.0 + sym(rng, self.contrast),
            saturation: 1.0 + sym(rng, self.saturation),
            hue: sym(rng, self.hue),
        }
    }
}

/// Concrete transform applied to every frame of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Radians, about the optical axis.
    pub rotation: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Turns.
    pub hue: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    fn is_geometric(&self) -> bool {
        self.rotation != 0.0 || self.flip
    }

    fn is_photometric(&self) -> bool {
        self.brightness != 1.0 || self.contrast != 1.0 || self.saturation != 1.0 || self.hue != 0.0
    }

    /// Camera-frame map `p ↦ A p`: mirror in x (if flipping), then rotate
    /// about the optical axis.
    pub fn camera_transform(&self) -> Matrix3<f64> {
        let (s, c) = self.rotation.sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let mirror = if self.flip {
            Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))
        } else {
            Matrix3::identity()
        };
        rz * mirror
    }
}

/// Draws parameters from `rng` and applies them.
pub fn augment(
    sample: &FrameSequenceSample,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> FrameSequenceSample {
    apply_augmentation(sample, &cfg.sample(rng))
}

/// Same geometric transform on image (bilinear), depth and labels (nearest);
/// color jitter on images only. Motions and intrinsics follow the transform.
pub fn apply_augmentation(sample: &FrameSequenceSample, p: &AugmentParams) -> FrameSequenceSample {
    let mut out = sample.clone();
    if p.is_geometric() {
        let k = sample.intrinsics;
        let mut k2 = k;
        if p.flip {
            k2.cx = (k.width - 1) as f64 - k.cx;
        }
        let a = p.camera_transform();
        let inv = k.matrix() * a.transpose() * k2.inverse_matrix();
        let map = SourceMap::new(&inv, k.width, k.height);
        out.frames = sample.frames.iter().map(|f| map.frame(f)).collect();
        out.motions = sample
            .motions
            .iter()
            .map(|m| Se3 {
                rotation: a * m.rotation * a.transpose(),
                translation: a * m.translation,
            })
            .collect();
        out.intrinsics = k2;
    }
    if p.is_photometric() {
        for f in &mut out.frames {
            f.image = jitter(&f.image, p);
        }
    }
    out
}

/// Source location of every output pixel.
struct SourceMap {
    width: usize,
    height: usize,
    coords: Vec<[f64; 2]>,
}

impl SourceMap {
    fn new(inv: &Matrix3<f64>, width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let q = inv * Vector3::new(x as f64, y as f64, 1.0);
                [q.x / q.z, q.y / q.z]
            })
            .collect();
        Self {
            width,
            height,
            coords,
        }
    }

    fn nearest(&self, i: usize) -> Option<usize> {
        let [u, v] = self.coords[i];
        let (x, y) = (u.round(), v.round());
        (x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64)
            .then(|| y as usize * self.width + x as usize)
    }

    fn frame(&self, f: &Frame) -> Frame {
        let (w, h) = (self.width, self.height);
        let mut image = Tensor::zeros(3, h, w);
        for i in 0..w * h {
            let [u, v] = self.coords[i];
            if let Some(t) = BilinearTaps::new(u, v, w, h) {
                for c in 0..3 {
                    image.channel_mut(c)[i] = t.sample(f.image.channel(c), w);
                }
            }
        }
        let depth = f.depth.as_ref().map(|d| {
            let mut values = vec![0.0; w * h];
            let mut valid = vec![false; w * h];
            for i in 0..w * h {
                if let Some(j) = self.nearest(i) {
                    values[i] = d.values[j];
                    valid[i] = d.valid[j];
                }
            }
            DepthMap {
                width: w,
                height: h,
                values,
                valid,
            }
        });
        let labels = f.labels.as_ref().map(|l| {
            let out = (0..w * h)
                .map(|i| self.nearest(i).map_or(IGNORE_LABEL, |j| l.labels[j]))
                .collect();
            LabelMap::new(w, h, out)
        });
        Frame {
            image,
            depth,
            labels,
        }
    }
}

fn jitter(img: &Tensor, p: &AugmentParams) -> Tensor {
    let n = img.plane_len();
    let luma = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| std::array::from_fn(|c| img.channel(c)[i] * p.brightness))
        .collect();
    let mean = px.iter().map(|q| luma(q[0], q[1], q[2])).sum::<f64>() / n as f64;
    for q in &mut px {
        for v in q.iter_mut() {
            *v = (*v - mean) * p.contrast + mean;
        }
        let gray = luma(q[0], q[1], q[2]);
        for v in q.iter_mut() {
            *v = gray + (*v - gray) * p.saturation;
        }
        if p.hue != 0.0 {
            *q = shift_hue(*q, p.hue);
        }
    }
    Tensor::from_fn(3, img.height(), img.width(), |c, y, x| {
        px[y * img.width() + x][c].clamp(0.0, 1.0)
    })
}

fn shift_hue([r, g, b]: [f64; 3], turns: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return [r, g, b];
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let h = (h + 6.0 * turns).rem_euclid(6.0);
    let x = d * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match h as u32 {
        0 => (d, x, 0.0),
        1 => (x, d, 0.0),
        2 => (0.0, d, x),
        3 => (0.0, x, d),
        4 => (x, 0.0, d),
        _ => (d, 0.0, x),
    };
    [r1 + min, g1 + min, b1 + min]
}
