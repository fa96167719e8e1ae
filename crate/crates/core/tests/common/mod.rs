#![allow(dead_code)]

use cosemdepth::autograd::Graph;
use cosemdepth::data::{generate_synthetic_scene, load_manifest, read_pfm, read_rgb, SceneConfig, Split};
use cosemdepth::geometry::{relative_motion, reproject, warp_map, CameraIntrinsics, DepthMap, LabelMap, Se3, WarpMode};
use cosemdepth::losses::{build_gt_pyramid, GroundTruthPyramid, LossConfig};
use cosemdepth::model::{ArchitectureConfig, CoSemDepth, ModelKind, SequenceInput};
use cosemdepth::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// M=2, 16×16 input, 4 channels at the first level, three classes.
pub fn tiny_config() -> ArchitectureConfig {
    ArchitectureConfig {
        num_levels: 2,
        encoder_channels: vec![4, 6],
        num_classes: 3,
        semantic_feature_channels: 4,
        refiner_depth: 1,
        refiner_width: 3,
        ..ArchitectureConfig::default()
    }
}

/// [`tiny_config`] with `num_classes` classes.
pub fn tiny_config_for(num_classes: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        num_classes,
        ..tiny_config()
    }
}

/// Smooth random images, small lateral motions and random ground truth.
pub fn random_sample(
    seed: u64,
    size: usize,
    num_classes: usize,
) -> (SequenceInput, DepthMap, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..3)
        .map(|_| {
            let ph: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
            Tensor::from_fn(3, size, size, |c, y, x| {
                0.5 + 0.3 * ((x as f64) * 0.7 + ph[c]).sin() * ((y as f64) * 0.5 + ph[c + 3]).cos()
            })
        })
        .collect();
    let motions = (0..2)
        .map(|_| {
            Se3::from_axis_angle(
                Vector3::new(
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                ),
                Vector3::new(rng.gen_range(0.3..0.6), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
            )
        })
        .collect();
    let f = size as f64;
    let intrinsics =
        CameraIntrinsics::new(f / 2.0, f / 2.0, (f - 1.0) / 2.0, (f - 1.0) / 2.0, size, size).unwrap();
    let depth = DepthMap::from_values(
        size,
        size,
        (0..size * size)
            .map(|i| if i % 17 == 3 { 0.0 } else { rng.gen_range(2.0..10.0) })
            .collect(),
    );
    let labels = LabelMap::new(
        size,
        size,
        (0..size * size)
            .map(|i| if i % 23 == 5 { 255 } else { rng.gen_range(0..num_classes as u8) })
            .collect(),
    );
    (
        SequenceInput {
            frames,
            motions,
            intrinsics,
            semantic_prior: None,
        },
        depth,
        labels,
    )
}

pub fn gt_for(model: &CoSemDepth, depth: &DepthMap, labels: &LabelMap) -> GroundTruthPyramid {
    build_gt_pyramid(
        Some(depth),
        Some(labels),
        model.config.num_levels,
        model.config.num_classes,
    )
    .unwrap()
}

pub fn total_loss(model: &CoSemDepth, seq: &SequenceInput, gt: &GroundTruthPyramid) -> f64 {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, seq).unwrap();
    let l = model.loss(&mut g, &out, gt, &LossConfig::default()).unwrap();
    g.scalar(l.total)
}

/// Worst relative error between analytic and central-difference gradients
/// over every scalar parameter, plus the parameter where it occurs.
pub fn gradient_check(seed: u64, step: f64) -> (f64, String, usize) {
    let mut model = CoSemDepth::new(tiny_config(), ModelKind::Joint, seed).unwrap();
    let (seq, depth, labels) = random_sample(seed + 100, 16, 3);
    let gt = gt_for(&model, &depth, &labels);
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &seq).unwrap();
    let l = model.loss(&mut g, &out, &gt, &LossConfig::default()).unwrap();
    assert!(l.depth.is_some() && l.semantic.is_some());
    let grads = g.backward(l.total);
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst = (0.0, String::new(), 0);
    let mut checked = 0;
    for id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            let s = model.params.get(id).shape();
            Tensor::zeros(s[0], s[1], s[2])
        });
        for i in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + step;
            let lp = total_loss(&model, &seq, &gt);
            model.params.get_mut(id).data_mut()[i] = orig - step;
            let lm = total_loss(&model, &seq, &gt);
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}] analytic {a} numeric {numeric}", model.params.name(id)), 0);
            }
        }
    }
    worst.2 = checked;
    worst
}

/// Mean absolute photometric error of warping frame t into frame t−1 with
/// exact depth, on in-view pixels.
pub fn warp_photometric_error(cfg: &SceneConfig) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_scene(cfg, dir.path()).unwrap();
    let records = load_manifest(dir.path(), Split::Train).unwrap();
    let k = records[0].intrinsics.unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for pair in records.windows(2) {
        let prev_img = read_rgb(&pair[0].image).unwrap();
        let curr_img = read_rgb(&pair[1].image).unwrap();
        let prev_depth = read_pfm(pair[0].depth.as_deref().unwrap()).unwrap();
        // maps points of frame t−1 into frame t
        let motion = relative_motion(&pair[1].pose.unwrap(), &pair[0].pose.unwrap()).unwrap();
        let field = reproject(&prev_depth, &motion, &k).unwrap();
        let (warped, in_view) = warp_map(&curr_img, &field, WarpMode::Bilinear).unwrap();
        for (i, &ok) in in_view.iter().enumerate() {
            if ok {
                for c in 0..3 {
                    sum += (warped.channel(c)[i] - prev_img.channel(c)[i]).abs();
                }
                n += 3;
            }
        }
    }
    assert!(n > 0);
    sum / n as f64
}
