//! Procedural ray-cast scenes: a textured ground plane with spheres and
//! boxes, seen from a camera sliding sideways above it.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classes::{BOULDERS, LAND, OTHERS, ROAD, SKY, TREES, WATER};
use super::io::{write_labels, write_pfm, write_rgb};
use super::manifest::{format_record, intrinsics_path, manifest_path, write_intrinsics, FrameRecord, Split};
use super::{DataError, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, LabelMap, Se3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov_degrees: f64,
    /// Camera height above the ground plane, meters.
    pub camera_height: f64,
    /// Downward tilt of the optical axis, degrees.
    pub tilt_degrees: f64,
    /// Sideways travel per frame, meters.
    pub speed: f64,
    pub object_count: usize,
    /// Multiplies every object dimension.
    pub object_scale: f64,
    /// Half width of the road strip, meters.
    pub road_half_width: f64,
    pub texture_seed: u64,
    pub frames_per_trajectory: usize,
    pub train_trajectories: usize,
    pub val_trajectories: usize,
    pub test_trajectories: usize,
    /// Rays travelling further than this see sky.
    pub max_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            horizontal_fov_degrees: 90.0,
            camera_height: 5.0,
            tilt_degrees: 30.0,
            speed: 0.6,
            object_count: 8,
            object_scale: 1.0,
            road_half_width: 1.6,
            texture_seed: 0,
            frames_per_trajectory: 20,
            train_trajectories: 1,
            val_trajectories: 0,
            test_trajectories: 0,
            max_distance: 80.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_trajectory == 0 {
            return Err(DataError::Config("trajectory length must be positive".into()));
        }
        if self.train_trajectories + self.val_trajectories + self.test_trajectories == 0 {
            return Err(DataError::Config("at least one trajectory is required".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(DataError::Config("image must be at least 2x2".into()));
        }
        if !(self.horizontal_fov_degrees > 0.0 && self.horizontal_fov_degrees < 180.0) {
            return Err(DataError::Config("field of view must be in (0, 180)".into()));
        }
        if !(self.object_scale > 0.0 && self.road_half_width >= 0.0) {
            return Err(DataError::Config("object scale and road width must be valid".into()));
        }
        if !(self.camera_height > 0.0 && self.max_distance > 0.0) {
            return Err(DataError::Config("camera height and max distance must be positive".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = (self.width as f64 / 2.0) / (self.horizontal_fov_degrees.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (self.width - 1) as f64 / 2.0,
            cy: (self.height - 1) as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// World-from-camera rotation of an untilted-yaw camera looking along +Y,
    /// pitched down by `tilt`. Camera axes: x right, y down, z forward.
    pub fn base_rotation(tilt_degrees: f64) -> Matrix3<f64> {
        let (s, c) = tilt_degrees.to_radians().sin_cos();
        Matrix3::from_columns(&[
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, -s, -c),
            Vector3::new(0.0, c, -s),
        ])
    }

    /// Smooth six-degree-of-freedom path of trajectory `k`, frame `i`.
    pub fn pose(&self, k: usize, i: usize) -> Se3 {
        let t = i as f64;
        let phase = k as f64 * 1.7;
        let position = Vector3::new(
            trajectory_origin(k) + self.speed * t,
            0.25 * (0.21 * t + phase).sin(),
            self.camera_height + 0.15 * (0.33 * t + phase).sin(),
        );
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.03 * (0.17 * t + phase).sin());
        let local = Rotation3::from_euler_angles(
            0.02 * (0.23 * t + phase).sin(),
            0.0,
            0.02 * (0.29 * t).cos() - 0.02,
        );
        let rotation = yaw.matrix() * Self::base_rotation(self.tilt_degrees) * local.matrix();
        Se3 {
            rotation,
            translation: position,
        }
    }
}

fn trajectory_origin(k: usize) -> f64 {
    1000.0 * k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
    pub color: [f64; 3],
}

/// Ground plane `Z = 0` plus objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub road_y: f64,
    pub road_half_width: f64,
    pub water_phase: [f64; 2],
    pub texture_phase: [f64; 4],
    pub max_distance: f64,
    pub ground: bool,
}

/// What a single ray sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; with a camera-frame direction of unit z this is z-depth.
    pub t: f64,
    pub class: u8,
    pub color: [f64; 3],
}

const SUN: [f64; 3] = [0.3, -0.4, 0.866];

impl Scene {
    /// Random objects placed along trajectory `k`.
    pub fn random(cfg: &SceneConfig, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed ^ (0x9e37_79b9 * (k as u64 + 1)));
        let x0 = trajectory_origin(k);
        let x1 = x0 + cfg.speed * cfg.frames_per_trajectory as f64;
        let road_y: f64 = rng.gen_range(9.0..16.0);
        let mut objects = Vec::with_capacity(cfg.object_count);
        for _ in 0..cfg.object_count {
            let x = rng.gen_range(x0 - 6.0..x1 + 6.0);
            let mut y: f64 = rng.gen_range(6.0..30.0);
            if (y - road_y).abs() < cfg.road_half_width + 0.9 {
                y += 2.0 * cfg.road_half_width + 1.8;
            }
            let kind: f64 = rng.gen();
            let jitter = rng.gen_range(0.85..1.15);
            let obj = if kind < 0.5 {
                let r = rng.gen_range(0.9..2.0) * cfg.object_scale;
                SceneObject {
                    shape: Shape::Sphere {
                        center: [x, y, r + rng.gen_range(0.0..1.0)],
                        radius: r,
                    },
                    class: TREES,
                    color: [0.15 * jitter, 0.45 * jitter, 0.12],
                }
            } else {
                let hx = rng.gen_range(0.5..1.5) * cfg.object_scale;
                let hy = rng.gen_range(0.5..1.5) * cfg.object_scale;
                let hz = rng.gen_range(0.6..2.0) * cfg.object_scale;
                let (class, color) = if kind < 0.8 {
                    (BOULDERS, [0.5 * jitter, 0.48 * jitter, 0.45 * jitter])
                } else {
                    (OTHERS, [0.8, 0.25 * jitter, 0.2])
                };
                SceneObject {
                    shape: Shape::Cuboid {
                        min: [x - hx, y - hy, 0.0],
                        max: [x + hx, y + hy, 2.0 * hz],
                    },
                    class,
                    color,
                }
            };
            objects.push(obj);
        }
        Self {
            objects,
            road_y,
            road_half_width: cfg.road_half_width,
            water_phase: [rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)],
            texture_phase: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
            max_distance: cfg.max_distance,
            ground: true,
        }
    }

    /// A bare ground plane.
    pub fn plane(max_distance: f64) -> Self {
        Self {
            objects: Vec::new(),
            road_y: f64::INFINITY,
            road_half_width: 0.0,
            water_phase: [0.0, 0.0],
            texture_phase: [0.0; 4],
            max_distance,
            ground: true,
        }
    }

    fn texture(&self, p: &Vector3<f64>) -> f64 {
        let ph = &self.texture_phase;
        0.5 + 0.25 * (1.1 * p.x + ph[0]).sin() * (0.9 * p.y + ph[1]).cos()
            + 0.25 * (0.7 * p.x - 0.5 * p.y + 0.8 * p.z + ph[2]).sin() * (0.6 * p.z + ph[3]).cos()
    }

    fn ground_class(&self, x: f64, y: f64) -> u8 {
        if (y - self.road_y).abs() < self.road_half_width {
            ROAD
        } else if (0.11 * x + self.water_phase[0]).sin() * (0.17 * y + self.water_phase[1]).sin() > 0.6 {
            WATER
        } else {
            LAND
        }
    }

    fn shade(&self, base: [f64; 3], p: &Vector3<f64>, normal: &Vector3<f64>) -> [f64; 3] {
        let sun = Vector3::from(SUN).normalize();
        let light = 0.55 + 0.45 * normal.dot(&sun).max(0.0);
        let tex = 0.6 + 0.4 * self.texture(p);
        base.map(|c| (c * light * tex).clamp(0.0, 1.0))
    }

    /// Nearest hit along `origin + t · dir`, or `None` for sky.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, u8, [f64; 3], Vector3<f64>)> = None;
        let mut consider = |t: f64, class: u8, color: [f64; 3], normal: Vector3<f64>| {
            if t > 1e-9 && best.is_none_or(|b| t < b.0) {
                best = Some((t, class, color, normal));
            }
        };
        if self.ground && dir.z < 0.0 {
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            let class = self.ground_class(p.x, p.y);
            let color = match class {
                ROAD => [0.3, 0.3, 0.32],
                WATER => [0.1, 0.25, 0.6],
                _ => [0.55, 0.45, 0.25],
            };
            consider(t, class, color, Vector3::z());
        }
        for obj in &self.objects {
            match obj.shape {
                Shape::Sphere { center, radius } => {
                    let c = Vector3::from(center);
                    let oc = origin - c;
                    let a = dir.norm_squared();
                    let b = oc.dot(dir);
                    let disc = b * b - a * (oc.norm_squared() - radius * radius);
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let n = (origin + dir * t - c) / radius;
                        consider(t, obj.class, obj.color, n);
                    }
                }
                Shape::Cuboid { min, max } => {
                    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                    let mut axis = 0;
                    for k in 0..3 {
                        if dir[k].abs() < 1e-15 {
                            if origin[k] < min[k] || origin[k] > max[k] {
                                t0 = f64::INFINITY;
                            }
                            continue;
                        }
                        let a = (min[k] - origin[k]) / dir[k];
                        let b = (max[k] - origin[k]) / dir[k];
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        if lo > t0 {
                            t0 = lo;
                            axis = k;
                        }
                        t1 = t1.min(hi);
                    }
                    if t0 <= t1 && t0.is_finite() {
                        let mut n = Vector3::zeros();
                        n[axis] = -dir[axis].signum();
                        consider(t0, obj.class, obj.color, n);
                    }
                }
            }
        }
        let (t, class, color, normal) = best?;
        if t * dir.norm() > self.max_distance {
            return None;
        }
        let p = origin + dir * t;
        Some(Hit {
            t,
            class,
            color: self.shade(color, &p, &normal),
        })
    }

    /// Image, z-depth (sky invalid) and labels seen from `pose`.
    pub fn render(&self, pose: &Se3, k: &CameraIntrinsics) -> (Tensor, DepthMap, LabelMap) {
        let (w, h) = (k.width, k.height);
        let mut image = Tensor::zeros(3, h, w);
        let mut depth = vec![0.0; w * h];
        let mut labels = vec![SKY; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dir = pose.rotation * d_cam;
                let color = match self.trace(&pose.translation, &dir) {
                    Some(hit) => {
                        depth[i] = hit.t;
                        labels[i] = hit.class;
                        hit.color
                    }
                    None => {
                        let e = (dir.z / dir.norm()).clamp(-1.0, 1.0);
                        [0.55 - 0.2 * e, 0.7 - 0.1 * e, 0.95]
                    }
                };
                for c in 0..3 {
                    image.channel_mut(c)[i] = color[c];
                }
            }
        }
        (image, DepthMap::from_values(w, h, depth), LabelMap::new(w, h, labels))
    }
}

/// Frames written per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyntheticSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Renders every trajectory under `root`: `images/`, `depth/` (PFM),
/// `semantic/`, one manifest per split, `intrinsics.txt` and `scene.toml`.
pub fn generate_synthetic_scene(cfg: &SceneConfig, root: &Path) -> Result<SyntheticSummary> {
    cfg.validate()?;
    for sub in ["images", "depth", "semantic"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| DataError::io(&d, e))?;
    }
    let k = cfg.intrinsics();
    let splits = std::iter::repeat_n(Split::Train, cfg.train_trajectories)
        .chain(std::iter::repeat_n(Split::Val, cfg.val_trajectories))
        .chain(std::iter::repeat_n(Split::Test, cfg.test_trajectories));
    let mut lines: [Vec<String>; 3] = Default::default();
    let mut summary = SyntheticSummary::default();
    for (traj, split) in splits.enumerate() {
        let scene = Scene::random(cfg, traj);
        let name = format!("traj{traj:03}");
        for i in 0..cfg.frames_per_trajectory {
            let pose = cfg.pose(traj, i);
            let (img, depth, labels) = scene.render(&pose, &k);
            let stem = format!("{name}_{i:04}");
            let rec = FrameRecord {
                trajectory: name.clone(),
                frame_index: i as u64,
                image: root.join("images").join(format!("{stem}.png")),
                depth: Some(root.join("depth").join(format!("{stem}.pfm"))),
                semantic: Some(root.join("semantic").join(format!("{stem}.png"))),
                pose: Some(pose),
                intrinsics: Some(k),
            };
            write_rgb(&rec.image, &img)?;
            write_pfm(rec.depth.as_deref().expect("set above"), &depth)?;
            write_labels(rec.semantic.as_deref().expect("set above"), &labels)?;
            lines[split as usize].push(format_record(&rec, root));
            match split {
                Split::Train => summary.train += 1,
                Split::Val => summary.val += 1,
                Split::Test => summary.test += 1,
            }
        }
    }
    for split in Split::ALL {
        let p = manifest_path(root, split);
        let mut text = lines[split as usize].join("\n");
        text.push('\n');
        fs::write(&p, text).map_err(|e| DataError::io(&p, e))?;
    }
    write_intrinsics(&intrinsics_path(root), &k)?;
    let p = root.join("scene.toml");
    let sidecar = toml::to_string(cfg).map_err(|e| DataError::Config(e.to_string()))?;
    fs::write(&p, sidecar).map_err(|e| DataError::io(&p, e))?;
    Ok(summary)
}
