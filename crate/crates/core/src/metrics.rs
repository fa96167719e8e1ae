//! Depth and segmentation evaluation, runtime measurement and parameter
//! counting.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::MIN_DEPTH;
use crate::geometry::{DepthMap, LabelMap, IGNORE_LABEL};
use crate::model::CoSemDepth;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("degenerate evaluation: no valid {0} pixels")]
    Degenerate(&'static str),
    #[error("evaluation maps differ in size: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("label {label} is outside 0..{num_classes}")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: u64,
    pub cap: f64,
}

/// Pixel-pooled depth error sums over any number of image pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAccumulator {
    pub cap: f64,
    sq: f64,
    rel: f64,
    within: [u64; 3],
    n: u64,
}

impl DepthAccumulator {
    pub fn new(cap: f64) -> Result<Self> {
        if !(cap > MIN_DEPTH) {
            return Err(MetricsError::InvalidArgument(format!("cap {cap} must exceed {MIN_DEPTH}")));
        }
        Ok(Self {
            cap,
            sq: 0.0,
            rel: 0.0,
            within: [0; 3],
            n: 0,
        })
    }

    /// Adds pixels valid in both maps; both are clamped to `[ε_d, cap]`.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(MetricsError::Shape((pred.width, pred.height), (gt.width, gt.height)));
        }
        for i in 0..gt.values.len() {
            if !(pred.valid[i] && gt.valid[i]) {
                continue;
            }
            let d = gt.values[i].clamp(MIN_DEPTH, self.cap);
            let p = pred.values[i].clamp(MIN_DEPTH, self.cap);
            self.sq += (d - p) * (d - p);
            self.rel += (d - p).abs() / d;
            let ratio = (d / p).max(p / d);
            for (k, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
                if ratio < *t {
                    self.within[k] += 1;
                }
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.sq += other.sq;
        self.rel += other.rel;
        for k in 0..3 {
            self.within[k] += other.within[k];
        }
        self.n += other.n;
    }

    pub fn report(&self) -> Result<DepthMetricsReport> {
        if self.n == 0 {
            return Err(MetricsError::Degenerate("depth"));
        }
        let n = self.n as f64;
        Ok(DepthMetricsReport {
            rmse: (self.sq / n).sqrt(),
            abs_rel: self.rel / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            valid_pixels: self.n,
            cap: self.cap,
        })
    }
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<DepthMetricsReport> {
    let mut acc = DepthAccumulator::new(cap)?;
    acc.add(pred, gt)?;
    acc.report()
}

/// `counts[gt * n + pred]` over non-ignored ground-truth pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(MetricsError::Shape((pred.width, pred.height), (gt.width, gt.height)));
        }
        let n = self.num_classes;
        let check = |l: u8| {
            if l as usize >= n {
                Err(MetricsError::LabelOutOfRange {
                    label: l,
                    num_classes: n,
                })
            } else {
                Ok(l as usize)
            }
        };
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (check(p)?, check(g)?);
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::InvalidArgument("class counts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self) -> Result<SegmentationReport> {
        if self.total() == 0 {
            return Err(MetricsError::Degenerate("semantic"));
        }
        let n = self.num_classes;
        let per_class_iou: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(SegmentationReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class_iou,
            confusion: self.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

pub fn segmentation_metrics(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<SegmentationReport> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.add(pred, gt)?;
    m.report()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub hardware: String,
}

/// One-line description of the machine running the benchmark.
pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {threads} hardware threads",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Times `iterations` calls of `frame` after `warmup` discarded calls.
pub fn runtime_benchmark(mut frame: impl FnMut(), iterations: usize, warmup: usize) -> Result<RuntimeReport> {
    if iterations == 0 {
        return Err(MetricsError::InvalidArgument("iterations must be at least 1".into()));
    }
    for _ in 0..warmup {
        frame();
    }
    let times: Vec<f64> = (0..iterations)
        .map(|_| {
            let t = Instant::now();
            frame();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    Ok(RuntimeReport {
        mean_ms: mean,
        std_ms: var.sqrt(),
        warmup,
        iterations,
        hardware: hardware_note(),
    })
}

/// Trainable scalars of `model`.
pub fn count_parameters(model: &CoSemDepth) -> usize {
    model.num_parameters()
}

/// Depth and segmentation results of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvaluationReport {
    pub frames: u64,
    pub depth: Option<DepthMetricsReport>,
    pub segmentation: Option<SegmentationReport>,
}

impl EvaluationReport {
    /// Flat `key = value` lines, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        if let Some(d) = &self.depth {
            let _ = writeln!(s, "depth.rmse = {}", d.rmse);
            let _ = writeln!(s, "depth.abs_rel = {}", d.abs_rel);
            let _ = writeln!(s, "depth.delta1 = {}", d.delta1);
            let _ = writeln!(s, "depth.delta2 = {}", d.delta2);
            let _ = writeln!(s, "depth.delta3 = {}", d.delta3);
            let _ = writeln!(s, "depth.valid_pixels = {}", d.valid_pixels);
            let _ = writeln!(s, "depth.cap = {}", d.cap);
        }
        if let Some(seg) = &self.segmentation {
            let _ = writeln!(s, "semantic.miou = {}", seg.miou);
            for (c, iou) in seg.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => writeln!(s, "semantic.iou.{c} = {v}"),
                    None => writeln!(s, "semantic.iou.{c} = nan"),
                }
                .expect("writing to a string");
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl RuntimeReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "runtime.mean_ms = {}\nruntime.std_ms = {}\nruntime.warmup = {}\nruntime.iterations = {}\nruntime.hardware = {}\n",
            self.mean_ms, self.std_ms, self.warmup, self.iterations, self.hardware
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_are_perfect() {
        let d = DepthMap::from_values(2, 2, vec![1.0, 5.0, 20.0, 0.0]);
        let r = depth_metrics(&d, &d, DEFAULT_DEPTH_CAP).unwrap();
        assert_eq!((r.rmse, r.abs_rel), (0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.valid_pixels, 3);
    }

    #[test]
    fn ratio_of_exactly_one_and_a_quarter() {
        let gt = DepthMap::constant(1, 1, 10.0);
        let pred = DepthMap::constant(1, 1, 12.5);
        let r = depth_metrics(&pred, &gt, DEFAULT_DEPTH_CAP).unwrap();
        assert!((r.abs_rel - 0.25).abs() < 1e-15);
        assert!((r.rmse - 2.5).abs() < 1e-15);
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 1.0, 1.0));
    }

    #[test]
    fn cap_clamps_both_maps() {
        let gt = DepthMap::constant(1, 1, 120.0);
        let pred = DepthMap::constant(1, 1, 200.0);
        let r = depth_metrics(&pred, &gt, 80.0).unwrap();
        assert_eq!((r.rmse, r.abs_rel, r.delta1), (0.0, 0.0, 1.0));
    }

    #[test]
    fn no_overlap_is_degenerate() {
        let gt = DepthMap::from_values(1, 2, vec![0.0, 3.0]);
        let pred = DepthMap::from_values(1, 2, vec![3.0, 0.0]);
        assert!(matches!(
            depth_metrics(&pred, &gt, 80.0),
            Err(MetricsError::Degenerate(_))
        ));
    }

    #[test]
    fn hand_counted_two_by_two() {
        let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]);
        let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]);
        let r = segmentation_metrics(&pred, &gt, 3).unwrap();
        assert!((r.per_class_iou[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class_iou[2], None);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ignore_pixels_are_skipped_and_rows_sum_to_gt_counts() {
        let gt = LabelMap::new(3, 1, vec![0, IGNORE_LABEL, 1]);
        let pred = LabelMap::new(3, 1, vec![0, 0, 0]);
        let mut m = ConfusionMatrix::new(2);
        m.add(&pred, &gt).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.get(1, 0), 1);
        let mut twice = m.clone();
        twice.merge(&m).unwrap();
        assert_eq!(twice.total(), 4);
        let empty = LabelMap::filled(2, 2, IGNORE_LABEL);
        assert!(segmentation_metrics(&LabelMap::filled(2, 2, 0), &empty, 2).is_err());
    }

    #[test]
    fn benchmark_discards_warmup() {
        let mut calls = 0;
        let r = runtime_benchmark(|| calls += 1, 1, 0).unwrap();
        assert_eq!((r.iterations, r.warmup, calls), (1, 0, 1));
        let mut calls = 0;
        runtime_benchmark(|| calls += 1, 3, 2).unwrap();
        assert_eq!(calls, 5);
        assert!(runtime_benchmark(|| (), 0, 0).is_err());
    }

    #[test]
    fn sleeping_stub_is_timed() {
        let r = runtime_benchmark(|| std::thread::sleep(std::time::Duration::from_millis(5)), 4, 1).unwrap();
        assert!(r.mean_ms >= 5.0 && r.mean_ms < 50.0, "{}", r.mean_ms);
    }
}
