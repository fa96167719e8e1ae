//! Camera geometry: rigid motions, pinhole projection, map warping and the
//! invertible parallax/depth transform.
//!
//! Pixel coordinates are corner-anchored: pixel `(x, y)` sits at coordinate
//! `(x, y)`, and a map downsampled by two keeps pixel `(2x, 2y)`. Depth is the
//! camera-frame z coordinate in meters.

use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Smallest parallax (pixels) that is still inverted to a depth.
pub const MIN_PARALLAX: f64 = 1e-4;
/// Smallest translation norm (meters) that defines a usable baseline.
pub const MIN_BASELINE: f64 = 1e-6;
/// Class id for unlabeled or out-of-view pixels.
pub const IGNORE_LABEL: u8 = 255;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("degenerate baseline: translation norm {0:e} m is below the minimum")]
    DegenerateBaseline(f64),
    #[error("label maps must be warped with nearest-neighbour sampling")]
    LabelModeMisuse,
    #[error("unknown warp mode `{0}`")]
    UnknownMode(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for the same camera rendered at another resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel coordinates of a camera-frame point, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Whether `(u, v)` lies on the pixel grid, up to rounding noise.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        in_bounds(u, v, self.width, self.height)
    }
}

const BOUNDS_TOL: f64 = 1e-9;

fn in_bounds(u: f64, v: f64, w: usize, h: usize) -> bool {
    u >= -BOUNDS_TOL
        && v >= -BOUNDS_TOL
        && u <= (w - 1) as f64 + BOUNDS_TOL
        && v <= (h - 1) as f64 + BOUNDS_TOL
}

/// A rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation from an axis-angle vector (Rodrigues) followed by translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = *nalgebra::Rotation3::new(axis_angle).matrix();
        Self {
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} is not 1"
            )));
        }
        Ok(())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major rotation followed by translation, the manifest pose layout.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        Se3::new(
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            Vector3::new(v[9], v[10], v[11]),
        )
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }
}

/// Motion mapping points from the current camera frame into the previous one,
/// given both world-from-camera poses.
pub fn relative_motion(pose_prev: &Se3, pose_curr: &Se3) -> Result<Se3> {
    pose_prev.validate()?;
    pose_curr.validate()?;
    Ok(pose_prev.inverse().compose(pose_curr))
}

/// Metric depth with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Wraps raw values; entries that are non-positive or non-finite are invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self::from_values(width, height, vec![depth; width * height])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    /// Corner-anchored nearest downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> DepthMap {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut values = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = y * factor * self.width + x * factor;
                values.push(self.values[i]);
                valid.push(self.valid[i]);
            }
        }
        DepthMap {
            width: w,
            height: h,
            values,
            valid,
        }
    }
}

/// Non-negative parallax in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallaxMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Per-pixel class ids with [`IGNORE_LABEL`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), width * height);
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self::new(width, height, vec![label; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn downsample(&self, factor: usize) -> LabelMap {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                labels.push(self.labels[y * factor * self.width + x * factor]);
            }
        }
        LabelMap::new(w, h, labels)
    }
}

/// Subpixel source coordinates for every target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
    pub in_view: Vec<bool>,
}

impl CorrespondenceField {
    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        Self {
            width,
            height,
            coords,
            in_view: vec![true; width * height],
        }
    }

    /// Field from explicit coordinates; the in-view mask follows the bounds.
    pub fn from_coords(width: usize, height: usize, coords: Vec<[f64; 2]>) -> Self {
        let in_view = coords
            .iter()
            .map(|c| in_bounds(c[0], c[1], width, height))
            .collect();
        Self {
            width,
            height,
            coords,
            in_view,
        }
    }
}

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(GeometryError::Shape { expected, actual });
    }
    Ok(())
}

/// Where each valid pixel of the current frame lands in the frame reached by `motion`.
pub fn reproject(
    depth: &DepthMap,
    motion: &Se3,
    intr: &CameraIntrinsics,
) -> Result<CorrespondenceField> {
    check_shape((intr.width, intr.height), (depth.width, depth.height))?;
    motion.validate()?;
    let n = depth.width * depth.height;
    let mut coords = Vec::with_capacity(n);
    let mut in_view = Vec::with_capacity(n);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let Some(d) = depth.get(x, y) else {
                coords.push([f64::NAN, f64::NAN]);
                in_view.push(false);
                continue;
            };
            let p = motion.transform_point(&intr.unproject(x as f64, y as f64, d));
            match intr.project(&p) {
                Some((u, v)) => {
                    coords.push([u, v]);
                    in_view.push(intr.contains(u, v));
                }
                None => {
                    coords.push([f64::NAN, f64::NAN]);
                    in_view.push(false);
                }
            }
        }
    }
    Ok(CorrespondenceField {
        width: depth.width,
        height: depth.height,
        coords,
        in_view,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    Bilinear,
    Nearest,
}

impl FromStr for WarpMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(WarpMode::Bilinear),
            "nearest" => Ok(WarpMode::Nearest),
            other => Err(GeometryError::UnknownMode(other.to_string())),
        }
    }
}

/// Bilinear taps for a coordinate inside `[0, w-1] × [0, h-1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTaps {
    pub fn new(u: f64, v: f64, w: usize, h: usize) -> Option<Self> {
        if !in_bounds(u, v, w, h) {
            return None;
        }
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let x0 = (u.floor() as usize).min(w.saturating_sub(2));
        let y0 = (v.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Some(Self {
            x0,
            x1,
            y0,
            y1,
            fx: u - x0 as f64,
            fy: v - y0 as f64,
        })
    }

    #[inline]
    pub fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let s00 = plane[self.y0 * w + self.x0];
        let s01 = plane[self.y0 * w + self.x1];
        let s10 = plane[self.y1 * w + self.x0];
        let s11 = plane[self.y1 * w + self.x1];
        (1.0 - self.fy) * ((1.0 - self.fx) * s00 + self.fx * s01)
            + self.fy * ((1.0 - self.fx) * s10 + self.fx * s11)
    }

    /// Partial derivatives of [`sample`](Self::sample) w.r.t. `(u, v)`.
    #[inline]
    pub fn gradient(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let s00 = plane[self.y0 * w + self.x0];
        let s01 = plane[self.y0 * w + self.x1];
        let s10 = plane[self.y1 * w + self.x0];
        let s11 = plane[self.y1 * w + self.x1];
        let du = (1.0 - self.fy) * (s01 - s00) + self.fy * (s11 - s10);
        let dv = (1.0 - self.fx) * (s10 - s00) + self.fx * (s11 - s01);
        (du, dv)
    }

    /// `(flat index, weight)` for each of the four taps.
    #[inline]
    pub fn weights(&self, w: usize) -> [(usize, f64); 4] {
        [
            (self.y0 * w + self.x0, (1.0 - self.fy) * (1.0 - self.fx)),
            (self.y0 * w + self.x1, (1.0 - self.fy) * self.fx),
            (self.y1 * w + self.x0, self.fy * (1.0 - self.fx)),
            (self.y1 * w + self.x1, self.fy * self.fx),
        ]
    }
}

/// Samples a continuous map through a correspondence field. Out-of-view
/// pixels are zero and flagged invalid in the returned mask.
pub fn warp_map(
    source: &Tensor,
    field: &CorrespondenceField,
    mode: WarpMode,
) -> Result<(Tensor, Vec<bool>)> {
    let (w, h) = (source.width(), source.height());
    check_shape((w, h), (field.width, field.height))?;
    let mut out = Tensor::zeros(source.channels(), h, w);
    let mut mask = vec![false; w * h];
    for (i, (&[u, v], &inside)) in field.coords.iter().zip(&field.in_view).enumerate() {
        if !inside {
            continue;
        }
        match mode {
            WarpMode::Bilinear => {
                let Some(taps) = BilinearTaps::new(u, v, w, h) else {
                    continue;
                };
                mask[i] = true;
                for c in 0..source.channels() {
                    let value = taps.sample(source.channel(c), w);
                    out.channel_mut(c)[i] = value;
                }
            }
            WarpMode::Nearest => {
                let (x, y) = (u.round(), v.round());
                if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                    continue;
                }
                mask[i] = true;
                let j = y as usize * w + x as usize;
                for c in 0..source.channels() {
                    let value = source.channel(c)[j];
                    out.channel_mut(c)[i] = value;
                }
            }
        }
    }
    Ok((out, mask))
}

/// Warps a class-id map. Only nearest sampling is meaningful for labels;
/// out-of-view pixels receive [`IGNORE_LABEL`].
pub fn warp_labels(
    labels: &LabelMap,
    field: &CorrespondenceField,
    mode: WarpMode,
) -> Result<(LabelMap, Vec<bool>)> {
    if mode != WarpMode::Nearest {
        return Err(GeometryError::LabelModeMisuse);
    }
    let (w, h) = (labels.width, labels.height);
    check_shape((w, h), (field.width, field.height))?;
    let mut out = LabelMap::filled(w, h, IGNORE_LABEL);
    let mut mask = vec![false; w * h];
    for (i, (&[u, v], &inside)) in field.coords.iter().zip(&field.in_view).enumerate() {
        if !inside {
            continue;
        }
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
            out.labels[i] = labels.get(x as usize, y as usize);
            mask[i] = true;
        }
    }
    Ok((out, mask))
}

/// Per-pixel constants of the parallax model for one motion and one camera.
///
/// For pixel `q`, let `a = K R K⁻¹ q̃` and `b = K t`. The rotation-only
/// reprojection (the point at infinity) is `a.xy / a.z`; a point at depth `d`
/// lands at that location plus `p · dir`, where `dir` is the unit epipolar
/// direction and `p = |c| / (a.z (d a.z + b.z))` with
/// `c = (a.z b.x − a.x b.z, a.z b.y − a.y b.z)`.
#[derive(Debug, Clone)]
pub struct ParallaxBasis {
    pub width: usize,
    pub height: usize,
    /// Rotation-only reprojection of each pixel.
    pub base: Vec<[f64; 2]>,
    /// Unit direction along which parallax displaces the reprojection.
    pub direction: Vec<[f64; 2]>,
    /// `|c| / a.z`.
    pub gain: Vec<f64>,
    pub a_z: Vec<f64>,
    pub b_z: Vec<f64>,
    /// False where the ray is behind the previous camera or sits on the epipole.
    pub valid: Vec<bool>,
    pub baseline: f64,
}

impl ParallaxBasis {
    pub fn new(motion: &Se3, intr: &CameraIntrinsics) -> Self {
        let k = intr.matrix();
        let krk = k * motion.rotation * intr.inverse_matrix();
        let b = k * motion.translation;
        let n = intr.width * intr.height;
        let mut basis = Self {
            width: intr.width,
            height: intr.height,
            base: Vec::with_capacity(n),
            direction: Vec::with_capacity(n),
            gain: Vec::with_capacity(n),
            a_z: Vec::with_capacity(n),
            b_z: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            baseline: motion.translation_norm(),
        };
        for y in 0..intr.height {
            for x in 0..intr.width {
                let a = krk * Vector3::new(x as f64, y as f64, 1.0);
                let c = [a.z * b.x - a.x * b.z, a.z * b.y - a.y * b.z];
                let c_norm = c[0].hypot(c[1]);
                let ok = a.z > 1e-12 && c_norm > 1e-12;
                basis.base.push(if a.z > 1e-12 {
                    [a.x / a.z, a.y / a.z]
                } else {
                    [f64::NAN, f64::NAN]
                });
                basis.direction.push(if ok {
                    [c[0] / c_norm, c[1] / c_norm]
                } else {
                    [0.0, 0.0]
                });
                basis.gain.push(if ok { c_norm / a.z } else { 0.0 });
                basis.a_z.push(a.z);
                basis.b_z.push(b.z);
                basis.valid.push(ok);
            }
        }
        basis
    }

    #[inline]
    pub fn parallax_of_depth(&self, i: usize, depth: f64) -> f64 {
        if !self.valid[i] {
            return 0.0;
        }
        let az = self.a_z[i];
        (self.gain[i] / (depth * az + self.b_z[i])).abs()
    }

    /// Inverse of [`parallax_of_depth`](Self::parallax_of_depth) along the ray,
    /// without validity checks on the result.
    #[inline]
    pub fn depth_of_parallax(&self, i: usize, parallax: f64) -> f64 {
        (self.gain[i] / parallax - self.b_z[i]) / self.a_z[i]
    }

    /// Derivative of [`depth_of_parallax`](Self::depth_of_parallax) w.r.t. parallax.
    #[inline]
    pub fn depth_of_parallax_slope(&self, i: usize, parallax: f64) -> f64 {
        -self.gain[i] / (self.a_z[i] * parallax * parallax)
    }
}

/// Rotation-compensated reprojection displacement of every pixel, in pixels.
/// Invalid depth pixels get zero parallax.
pub fn depth_to_parallax(
    depth: &DepthMap,
    motion: &Se3,
    intr: &CameraIntrinsics,
) -> Result<ParallaxMap> {
    check_shape((intr.width, intr.height), (depth.width, depth.height))?;
    motion.validate()?;
    let basis = ParallaxBasis::new(motion, intr);
    let values = (0..depth.values.len())
        .map(|i| {
            if depth.valid[i] {
                basis.parallax_of_depth(i, depth.values[i])
            } else {
                0.0
            }
        })
        .collect();
    Ok(ParallaxMap {
        width: depth.width,
        height: depth.height,
        values,
    })
}

/// Exact per-ray inverse of [`depth_to_parallax`]. Pixels with parallax below
/// [`MIN_PARALLAX`], on the epipole, or yielding a non-positive depth are invalid.
pub fn parallax_to_depth(
    parallax: &ParallaxMap,
    motion: &Se3,
    intr: &CameraIntrinsics,
) -> Result<DepthMap> {
    check_shape((intr.width, intr.height), (parallax.width, parallax.height))?;
    motion.validate()?;
    let baseline = motion.translation_norm();
    if baseline < MIN_BASELINE {
        return Err(GeometryError::DegenerateBaseline(baseline));
    }
    let basis = ParallaxBasis::new(motion, intr);
    let n = parallax.values.len();
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        let p = parallax.values[i];
        if !basis.valid[i] || !(p >= MIN_PARALLAX) || !p.is_finite() {
            continue;
        }
        let d = basis.depth_of_parallax(i, p);
        if d.is_finite() && d > 0.0 {
            values[i] = d;
            valid[i] = true;
        }
    }
    Ok(DepthMap {
        width: parallax.width,
        height: parallax.height,
        values,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize, f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> Se3 {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let t = Vector3::new(
            rng.gen_range(-max_t..max_t),
            rng.gen_range(-max_t..max_t),
            rng.gen_range(-max_t..max_t),
        );
        Se3::from_axis_angle(axis * rng.gen_range(0.0..max_angle), t)
    }

    #[test]
    fn relative_motion_of_equal_poses_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng, 3.0, 10.0);
        let rel = relative_motion(&pose, &pose).unwrap();
        assert!((rel.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(rel.translation.norm() < 1e-12);
    }

    #[test]
    fn relative_motion_with_identity_previous_pose() {
        let curr = Se3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let rel = relative_motion(&Se3::identity(), &curr).unwrap();
        assert!((rel.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn relative_motion_matches_homogeneous_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_pose(&mut rng, 3.0, 20.0);
            let b = random_pose(&mut rng, 3.0, 20.0);
            let rel = relative_motion(&a, &b).unwrap().to_homogeneous();
            // Homogeneous inverse via general 4×4 inversion, independent of Se3::inverse.
            let oracle = a.to_homogeneous().try_inverse().unwrap() * b.to_homogeneous();
            assert!((rel - oracle).abs().max() < 1e-9);
        }
    }

    #[test]
    fn relative_motion_rejects_non_orthonormal_rotation() {
        let bad = Se3 {
            rotation: Matrix3::identity() * 1.1,
            translation: Vector3::zeros(),
        };
        assert!(matches!(
            relative_motion(&bad, &Se3::identity()),
            Err(GeometryError::InvalidPose(_))
        ));
    }

    #[test]
    fn se3_closure_over_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = Se3::identity();
        for _ in 0..1000 {
            let t = random_pose(&mut rng, std::f64::consts::PI, 5.0);
            acc = acc.compose(&t);
            acc.validate().unwrap();
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-6);
            assert!(id.translation.norm() < 1e-6);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, c) = (
            random_pose(&mut rng, 3.0, 5.0),
            random_pose(&mut rng, 3.0, 5.0),
            random_pose(&mut rng, 3.0, 5.0),
        );
        let l = a.compose(&b).compose(&c).to_homogeneous();
        let r = a.compose(&b.compose(&c)).to_homogeneous();
        assert!((l - r).abs().max() < 1e-12);
    }

    #[test]
    fn reproject_identity_motion_is_pixel_grid() {
        let k = intr(8, 6, 10.0);
        let depth = DepthMap::constant(8, 6, 3.0);
        let field = reproject(&depth, &Se3::identity(), &k).unwrap();
        let grid = CorrespondenceField::identity(8, 6);
        assert_eq!(field.in_view, grid.in_view);
        for (a, b) in field.coords.iter().zip(&grid.coords) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn reproject_lateral_translation_shifts_by_focal_baseline_over_depth() {
        let k = intr(64, 32, 100.0);
        let depth = DepthMap::constant(64, 32, 10.0);
        let motion = Se3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let field = reproject(&depth, &motion, &k).unwrap();
        for y in 0..32 {
            for x in 0..64 {
                let [u, v] = field.coords[y * 64 + x];
                assert!((u - (x as f64 + 10.0)).abs() < 1e-9);
                assert!((v - y as f64).abs() < 1e-9);
                assert_eq!(field.in_view[y * 64 + x], x + 10 <= 63);
            }
        }
    }

    #[test]
    fn reproject_behind_camera_is_out_of_view() {
        let k = intr(4, 4, 10.0);
        let depth = DepthMap::constant(4, 4, 1.0);
        let motion = Se3::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let field = reproject(&depth, &motion, &k).unwrap();
        assert!(field.in_view.iter().all(|v| !v));
    }

    #[test]
    fn reproject_rejects_resolution_mismatch() {
        let k = intr(4, 4, 10.0);
        let depth = DepthMap::constant(5, 4, 1.0);
        assert!(matches!(
            reproject(&depth, &Se3::identity(), &k),
            Err(GeometryError::Shape { .. })
        ));
    }

    #[test]
    fn warp_identity_field_is_identity() {
        let src = Tensor::from_fn(2, 4, 5, |c, y, x| (c * 31 + y * 7 + x) as f64 * 0.1);
        let field = CorrespondenceField::identity(5, 4);
        for mode in [WarpMode::Bilinear, WarpMode::Nearest] {
            let (out, mask) = warp_map(&src, &field, mode).unwrap();
            assert_eq!(out, src);
            assert!(mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn warp_integer_shift_nearest_matches_index_shift() {
        let src = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let coords = (0..4)
            .flat_map(|y| (0..4).map(move |x| [x as f64 + 1.0, y as f64 - 1.0]))
            .collect();
        let field = CorrespondenceField::from_coords(4, 4, coords);
        let (out, mask) = warp_map(&src, &field, WarpMode::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = x + 1 < 4 && y >= 1;
                assert_eq!(mask[y * 4 + x], inside);
                let expect = if inside { ((y - 1) * 4 + x + 1) as f64 } else { 0.0 };
                assert_eq!(out.at(0, y, x), expect);
            }
        }
    }

    #[test]
    fn warp_labels_rejects_bilinear_and_fills_ignore() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]);
        let field = CorrespondenceField::identity(2, 2);
        assert_eq!(
            warp_labels(&labels, &field, WarpMode::Bilinear),
            Err(GeometryError::LabelModeMisuse)
        );
        let shifted = CorrespondenceField::from_coords(
            2,
            2,
            vec![[1.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 1.0]],
        );
        let (out, _) = warp_labels(&labels, &shifted, WarpMode::Nearest).unwrap();
        assert_eq!(out.labels, vec![1, IGNORE_LABEL, 3, IGNORE_LABEL]);
    }

    #[test]
    fn warp_mode_parsing() {
        assert_eq!("nearest".parse::<WarpMode>().unwrap(), WarpMode::Nearest);
        assert!(matches!(
            "cubic".parse::<WarpMode>(),
            Err(GeometryError::UnknownMode(_))
        ));
    }

    #[test]
    fn pure_rotation_has_zero_parallax() {
        let k = intr(16, 16, 20.0);
        let depth = DepthMap::constant(16, 16, 7.0);
        let motion = Se3::from_axis_angle(Vector3::new(0.02, -0.05, 0.01), Vector3::zeros());
        let p = depth_to_parallax(&depth, &motion, &k).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        assert!(matches!(
            parallax_to_depth(&p, &motion, &k),
            Err(GeometryError::DegenerateBaseline(_))
        ));
    }

    #[test]
    fn lateral_parallax_is_stereo_disparity() {
        let k = intr(64, 64, 100.0);
        let depth = DepthMap::constant(64, 64, 50.0);
        let motion = Se3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = depth_to_parallax(&depth, &motion, &k).unwrap();
        let center = 32 * 64 + 32;
        assert!((p.values[center] - 2.0).abs() < 1e-6 * 2.0);
    }

    /// Independent two-view oracle: project the 3D point and the direction at
    /// infinity with the full camera model and measure their distance.
    fn parallax_oracle(k: &CameraIntrinsics, motion: &Se3, x: f64, y: f64, d: f64) -> f64 {
        let p = motion.transform_point(&k.unproject(x, y, d));
        let (u1, v1) = k.project(&p).unwrap();
        let ray = motion.rotation * k.unproject(x, y, 1.0);
        let (u2, v2) = k.project(&ray).unwrap();
        (u1 - u2).hypot(v1 - v2)
    }

    #[test]
    fn parallax_matches_two_view_oracle_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = intr(24, 16, 30.0);
        for _ in 0..20 {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let axis = Vector3::new(
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            );
            let motion = Se3::from_axis_angle(axis, dir * 0.5);
            let values: Vec<f64> = (0..24 * 16).map(|_| rng.gen_range(1.0..80.0)).collect();
            let depth = DepthMap::from_values(24, 16, values);
            let p = depth_to_parallax(&depth, &motion, &k).unwrap();
            let back = parallax_to_depth(&p, &motion, &k).unwrap();
            for y in 0..16 {
                for x in 0..24 {
                    let i = y * 24 + x;
                    let d = depth.values[i];
                    let oracle = parallax_oracle(&k, &motion, x as f64, y as f64, d);
                    assert!((p.values[i] - oracle).abs() <= 1e-9 * oracle.max(1.0));
                    if p.values[i] > MIN_PARALLAX {
                        assert!(back.valid[i]);
                        assert!((back.values[i] - d).abs() / d < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn parallax_displacement_reproduces_reprojection() {
        let k = intr(20, 12, 18.0);
        let motion = Se3::from_axis_angle(
            Vector3::new(0.01, 0.03, -0.02),
            Vector3::new(0.4, -0.1, 0.2),
        );
        let depth = DepthMap::from_values(20, 12, (0..240).map(|i| 2.0 + (i % 17) as f64).collect());
        let field = reproject(&depth, &motion, &k).unwrap();
        let p = depth_to_parallax(&depth, &motion, &k).unwrap();
        let basis = ParallaxBasis::new(&motion, &k);
        for i in 0..240 {
            let u = basis.base[i][0] + p.values[i] * basis.direction[i][0];
            let v = basis.base[i][1] + p.values[i] * basis.direction[i][1];
            assert!((u - field.coords[i][0]).abs() < 1e-9);
            assert!((v - field.coords[i][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_parallax_is_invalid_depth() {
        let k = intr(4, 4, 10.0);
        let motion = Se3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = ParallaxMap {
            width: 4,
            height: 4,
            values: vec![MIN_PARALLAX / 2.0; 16],
        };
        let d = parallax_to_depth(&p, &motion, &k).unwrap();
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn intrinsics_validation_and_scaling() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let k = intr(64, 32, 40.0);
        let s = k.scaled_to(16, 8);
        assert_eq!((s.fx, s.fy, s.cx, s.cy), (10.0, 10.0, 8.0, 4.0));
        s.validate().unwrap();
    }

    #[test]
    fn downsample_keeps_top_left_of_each_block() {
        let labels = LabelMap::new(2, 2, vec![3, 1, 1, 3]);
        assert_eq!(labels.downsample(2).labels, vec![3]);
    }
}
