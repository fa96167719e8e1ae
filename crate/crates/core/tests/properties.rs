mod common;

use std::collections::BTreeSet;

use cosemdepth::data::{apply_augmentation, AugmentParams, ClassMapping, Frame, FrameSequenceSample};
use cosemdepth::geometry::{
    depth_to_parallax, parallax_to_depth, CameraIntrinsics, DepthMap, LabelMap, Se3, IGNORE_LABEL,
};
use cosemdepth::losses::{depth_loss, semantic_loss, GroundTruthPyramid, LossConfig};
use cosemdepth::metrics::{depth_metrics, segmentation_metrics, ConfusionMatrix};
use cosemdepth::model::{ArchitectureConfig, CoSemDepth, ModelKind};
use cosemdepth::Tensor;
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Se3> {
    (vec3(3.0), vec3(10.0)).prop_map(|(w, t)| Se3::from_axis_angle(w, t))
}

fn orthonormal_err(s: &Se3) -> f64 {
    let r = s.rotation;
    (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max().max((r.determinant() - 1.0).abs())
}

fn intr16() -> CameraIntrinsics {
    CameraIntrinsics::new(18.0, 17.0, 7.5, 7.25, 16, 16).unwrap()
}

fn depth_map(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(prop::option::weighted(0.85, 0.5f64..60.0), w * h).prop_map(move |v| {
        let mut d = DepthMap::from_values(w, h, v.iter().map(|x| x.unwrap_or(1.0)).collect());
        for (i, x) in v.iter().enumerate() {
            if x.is_none() {
                d.valid[i] = false;
                d.values[i] = 0.0;
            }
        }
        d
    })
}

fn labels(w: usize, h: usize, nc: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(prop_oneof![9 => 0..nc, 1 => Just(IGNORE_LABEL)], w * h)
        .prop_map(move |l| LabelMap::new(w, h, l))
}

fn single_level(pred: DepthMap, gt: DepthMap) -> (Vec<DepthMap>, GroundTruthPyramid) {
    (
        vec![pred],
        GroundTruthPyramid {
            depth: Some(vec![gt]),
            labels: None,
        },
    )
}

fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn se3_compose_and_inverse_stay_rigid(a in pose(), b in pose()) {
        let c = a.compose(&b);
        prop_assert!(orthonormal_err(&c) < 1e-6);
        prop_assert!(orthonormal_err(&c.inverse()) < 1e-6);
        let id = c.compose(&c.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!(id.translation.norm() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parallax_roundtrip_on_visible_pixels(w in vec3(0.2), t in vec3(2.0), depth in depth_map(16, 16)) {
        prop_assume!(t.norm() >= 0.1);
        let motion = Se3::from_axis_angle(w, t);
        let intr = intr16();
        let par = depth_to_parallax(&depth, &motion, &intr).unwrap();
        let back = parallax_to_depth(&par, &motion, &intr).unwrap();
        for i in 0..256 {
            let p = intr.unproject((i % 16) as f64, (i / 16) as f64, depth.values[i]);
            if depth.valid[i] && back.valid[i] && motion.transform_point(&p).z > 0.0 {
                let e = (back.values[i] - depth.values[i]).abs() / depth.values[i];
                prop_assert!(e < 1e-6, "pixel {i}: {} vs {}", back.values[i], depth.values[i]);
            }
        }
    }

    #[test]
    fn lateral_parallax_is_disparity(b in 0.05f64..3.0, d in 0.5f64..100.0) {
        let intr = intr16();
        let motion = Se3::from_translation(Vector3::new(b, 0.0, 0.0));
        let par = depth_to_parallax(&DepthMap::constant(16, 16, d), &motion, &intr).unwrap();
        // the principal point (7.5, 7.25) lies between pixels; every pixel
        // sees the same disparity under pure lateral motion
        for &p in &par.values {
            prop_assert!((p - intr.fx * b / d).abs() / p < 1e-6);
        }
    }

    #[test]
    fn geometry_is_deterministic(w in vec3(0.2), t in vec3(2.0), depth in depth_map(8, 8)) {
        let intr = CameraIntrinsics::new(9.0, 9.0, 3.5, 3.5, 8, 8).unwrap();
        let motion = Se3::from_axis_angle(w, t);
        let a = depth_to_parallax(&depth, &motion, &intr).unwrap();
        let b = depth_to_parallax(&depth, &motion, &intr).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn losses_ignore_pixel_order(
        pred in depth_map(4, 4),
        gt in depth_map(4, 4),
        lab in labels(4, 4, 5),
        probs in prop::collection::vec(0.01f64..1.0, 5 * 16),
        perm in Just((0..16).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!((0..16).any(|i| pred.valid[i] && gt.valid[i]));
        prop_assume!(lab.labels.iter().any(|&l| l != IGNORE_LABEL));
        let cfg = LossConfig::default();
        let shuffle_depth = |d: &DepthMap| DepthMap {
            width: 4,
            height: 4,
            values: permute(&d.values, &perm),
            valid: permute(&d.valid, &perm),
        };
        let (p, g) = single_level(pred.clone(), gt.clone());
        let (ps, gs) = single_level(shuffle_depth(&pred), shuffle_depth(&gt));
        let a = depth_loss(&p, &g, &cfg).unwrap().value;
        let b = depth_loss(&ps, &gs, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));

        let prob = Tensor::from_vec(5, 4, 4, probs.clone());
        let prob_s = Tensor::from_fn(5, 4, 4, |c, y, x| probs[c * 16 + perm[y * 4 + x]]);
        let lab_s = LabelMap::new(4, 4, permute(&lab.labels, &perm));
        let gt_l = |l: LabelMap| GroundTruthPyramid { depth: None, labels: Some(vec![l]) };
        let a = semantic_loss(&[prob], &gt_l(lab)).unwrap();
        let b = semantic_loss(&[prob_s], &gt_l(lab_s)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn depth_loss_is_scale_invariant(pred in depth_map(4, 4), gt in depth_map(4, 4), k in 0.1f64..10.0) {
        prop_assume!((0..16).any(|i| pred.valid[i] && gt.valid[i]));
        let scale = |d: &DepthMap| DepthMap { values: d.values.iter().map(|v| v * k).collect(), ..d.clone() };
        let cfg = LossConfig::default();
        let (p, g) = single_level(pred.clone(), gt.clone());
        let (ps, gs) = single_level(scale(&pred), scale(&gt));
        let a = depth_loss(&p, &g, &cfg).unwrap().value;
        let b = depth_loss(&ps, &gs, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn depth_loss_grows_with_pixel_error(gt in depth_map(4, 4), pixel in 0usize..16, e1 in 0.0f64..2.0, extra in 0.01f64..2.0) {
        prop_assume!(gt.valid[pixel]);
        let cfg = LossConfig::default();
        let with_error = |e: f64| {
            let mut pred = gt.clone();
            pred.values[pixel] = gt.values[pixel] * e.exp();
            let (p, g) = single_level(pred, gt.clone());
            depth_loss(&p, &g, &cfg).unwrap().value
        };
        prop_assert!(with_error(e1 + extra) > with_error(e1));
    }

    #[test]
    fn level_weight_law(m in 1usize..5, level in 0usize..4, n_valid in 1usize..17) {
        prop_assume!(level < m);
        let sizes: Vec<usize> = (0..m).map(|i| 1 << (i + 1)).collect();
        let gt: Vec<DepthMap> = sizes.iter().map(|&s| DepthMap::constant(s, s, 3.0)).collect();
        let mut pred = gt.clone();
        let s = sizes[level];
        let n_valid = n_valid.min(s * s);
        for (i, valid) in pred[level].valid.iter_mut().enumerate() {
            *valid = i < n_valid;
        }
        // unit log-error at one valid pixel of `level`, zero elsewhere
        pred[level].values[0] = 3.0 * std::f64::consts::E;
        let g = GroundTruthPyramid { depth: Some(gt), labels: None };
        let v = depth_loss(&pred, &g, &LossConfig::default()).unwrap().value;
        let expected = 2f64.powi(level as i32 + 2) / n_valid as f64;
        prop_assert!((v - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn delta_is_monotone_in_threshold(pred in depth_map(16, 16), gt in depth_map(16, 16)) {
        prop_assume!((0..256).any(|i| pred.valid[i] && gt.valid[i]));
        let r = depth_metrics(&pred, &gt, 80.0).unwrap();
        prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
    }

    #[test]
    fn miou_invariant_under_relabeling(
        pred in prop::collection::vec(0u8..5, 256).prop_map(|l| LabelMap::new(16, 16, l)),
        gt in labels(16, 16, 5),
        perm in Just(vec![0u8, 1, 2, 3, 4]).prop_shuffle(),
    ) {
        prop_assume!(gt.labels.iter().any(|&l| l != IGNORE_LABEL));
        let relabel = |m: &LabelMap| LabelMap::new(
            16,
            16,
            m.labels.iter().map(|&l| if l == IGNORE_LABEL { l } else { perm[l as usize] }).collect(),
        );
        let a = segmentation_metrics(&pred, &gt, 5).unwrap().miou;
        let b = segmentation_metrics(&relabel(&pred), &relabel(&gt), 5).unwrap().miou;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn confusion_total_counts_non_ignored(pred in labels(16, 16, 5), gt in labels(16, 16, 5)) {
        let pred = LabelMap::new(16, 16, pred.labels.iter().map(|&l| if l == IGNORE_LABEL { 0 } else { l }).collect());
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&pred, &gt).unwrap();
        let n = gt.labels.iter().filter(|&&l| l != IGNORE_LABEL).count() as u64;
        prop_assert_eq!(cm.total(), n);
    }

    #[test]
    fn remap_is_total(src in prop::collection::vec(prop_oneof![14 => 0u8..14, 1 => Just(IGNORE_LABEL)], 64)) {
        let out = ClassMapping::default().remap(&LabelMap::new(8, 8, src.clone())).unwrap();
        for (s, t) in src.iter().zip(&out.labels) {
            prop_assert!((*t as usize) < 7 || (*s == IGNORE_LABEL && *t == IGNORE_LABEL));
        }
    }
}

fn sample(depth: DepthMap, lab: LabelMap) -> FrameSequenceSample {
    let frame = Frame {
        image: Tensor::from_fn(3, 16, 16, |c, y, x| ((c + 2 * x + 3 * y) % 11) as f64 / 10.0),
        depth: Some(depth),
        labels: Some(lab),
    };
    FrameSequenceSample {
        frames: vec![frame.clone(), frame],
        motions: vec![Se3::from_translation(Vector3::new(0.3, 0.0, 0.0))],
        intrinsics: intr16(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_and_jitter_preserve_labels_and_masks(
        depth in depth_map(16, 16),
        lab in labels(16, 16, 7),
        flip in any::<bool>(),
        brightness in 0.8f64..1.2,
        hue in -0.05f64..0.05,
    ) {
        let s = sample(depth, lab);
        let p = AugmentParams { flip, brightness, hue, ..AugmentParams::identity() };
        let out = apply_augmentation(&s, &p);
        for (a, b) in s.frames.iter().zip(&out.frames) {
            let count = |l: &LabelMap| {
                let mut c = [0usize; 256];
                l.labels.iter().for_each(|&x| c[x as usize] += 1);
                c
            };
            prop_assert_eq!(count(a.labels.as_ref().unwrap()), count(b.labels.as_ref().unwrap()));
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            prop_assert_eq!(da.valid_count(), db.valid_count());
        }
    }

    #[test]
    fn rotation_never_invents_labels_or_depths(
        depth in depth_map(16, 16),
        lab in labels(16, 16, 7),
        rotation in -0.26f64..0.26,
        flip in any::<bool>(),
    ) {
        let s = sample(depth, lab);
        let out = apply_augmentation(&s, &AugmentParams { rotation, flip, ..AugmentParams::identity() });
        for (a, b) in s.frames.iter().zip(&out.frames) {
            let src: BTreeSet<u8> = a.labels.as_ref().unwrap().labels.iter().copied().collect();
            prop_assert!(b.labels.as_ref().unwrap().labels.iter().all(|l| *l == IGNORE_LABEL || src.contains(l)));
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for i in 0..256 {
                if db.valid[i] {
                    prop_assert!((0..256).any(|j| da.valid[j] && da.values[j] == db.values[i]));
                }
            }
        }
    }
}

fn small_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        num_levels: 3,
        encoder_channels: vec![4, 6, 8],
        num_classes: 5,
        refiner_depth: 1,
        refiner_width: 4,
        ..ArchitectureConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_halves_per_level(m in 2usize..6, kx in 1usize..4, ky in 1usize..4, seed in 0u64..50) {
        let cfg = ArchitectureConfig {
            num_levels: m,
            encoder_channels: (1..=m).map(|l| 2 * l).collect(),
            num_classes: 3,
            refiner_depth: 1,
            refiner_width: 2,
            ..ArchitectureConfig::default()
        };
        let (w, h) = (kx << m, ky << m);
        let model = CoSemDepth::new(cfg, ModelKind::Joint, seed).unwrap();
        let pyr = model.encode(&Tensor::filled(3, h, w, 0.3)).unwrap();
        prop_assert_eq!(pyr.len(), m);
        for (i, t) in pyr.iter().enumerate() {
            prop_assert_eq!((t.width(), t.height()), (w >> (i + 1), h >> (i + 1)));
        }
    }

    #[test]
    fn probabilities_sum_to_one(seed in 0u64..1000) {
        let model = CoSemDepth::new(small_arch(), ModelKind::Joint, seed).unwrap();
        let (seq, _, _) = common::random_sample(seed, 16, 5);
        let out = model.forward_joint(&seq).unwrap();
        let check = |p: &Tensor| {
            (0..p.plane_len()).all(|i| {
                let s: f64 = (0..p.channels()).map(|c| p.data()[c * p.plane_len() + i]).sum();
                (s - 1.0).abs() < 1e-5
            })
        };
        prop_assert!(check(out.probabilities.as_ref().unwrap()));
        for level in &out.levels {
            prop_assert!(check(&level.semantic.as_ref().unwrap().probabilities));
        }
    }

    #[test]
    fn encoder_weights_feed_both_decoders(seed in 0u64..1000, delta in 0.05f64..0.5) {
        let mut model = CoSemDepth::new(small_arch(), ModelKind::Joint, seed).unwrap();
        let (seq, _, _) = common::random_sample(seed, 16, 5);
        let before = model.forward_joint(&seq).unwrap();
        let id = model.params.id("encoder.level2.conv1.weight").unwrap();
        for v in model.params.get_mut(id).data_mut() {
            *v += delta;
        }
        let after = model.forward_joint(&seq).unwrap();
        prop_assert_ne!(before.depth, after.depth);
        prop_assert_ne!(before.probabilities, after.probabilities);
    }
}
