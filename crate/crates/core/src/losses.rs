//! Multi-level training objectives: the log-L1 depth loss, the per-level
//! cross-entropy semantic loss and their weighted sum.
//!
//! Pyramid levels are stored coarsest first. With the default
//! [`LevelOrientation::CoarsestFirst`], level `l = 1` is the coarsest map and
//! the finest map carries the largest depth weight `2^(M+1)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var, MIN_DEPTH};
use crate::geometry::{DepthMap, LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("degenerate batch: no valid pixels for the {0} loss")]
    DegenerateBatch(&'static str),
    #[error("label {label} is outside 0..{num_classes} and is not the ignore label")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("pyramid mismatch: {0}")]
    Shape(String),
    #[error("training diverged: non-finite or negative loss (depth {depth}, semantic {semantic})")]
    Divergence { depth: f64, semantic: f64 },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LevelOrientation {
    /// `l = 1` is the coarsest decoder level.
    #[default]
    CoarsestFirst,
    /// `l = 1` is the finest decoder level.
    FinestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub semantic_weight: f64,
    pub level_orientation: LevelOrientation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            semantic_weight: 0.1,
            level_orientation: LevelOrientation::CoarsestFirst,
        }
    }
}

impl LossConfig {
    /// Depth weight `2^(l+1)` of the level stored at `index` (coarsest = 0).
    pub fn depth_level_weight(&self, index: usize, num_levels: usize) -> f64 {
        let l = match self.level_orientation {
            LevelOrientation::CoarsestFirst => index + 1,
            LevelOrientation::FinestFirst => num_levels - index,
        };
        2f64.powi(l as i32 + 1)
    }
}

/// Ground truth resampled to every decoder level, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPyramid {
    pub depth: Option<Vec<DepthMap>>,
    pub labels: Option<Vec<LabelMap>>,
}

impl GroundTruthPyramid {
    pub fn num_levels(&self) -> usize {
        self.depth
            .as_ref()
            .map(Vec::len)
            .or_else(|| self.labels.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Valid-pixel counts `N_p^l` of the depth levels.
    pub fn depth_pixel_counts(&self) -> Vec<usize> {
        self.depth
            .iter()
            .flatten()
            .map(DepthMap::valid_count)
            .collect()
    }

    /// Non-ignored pixel counts of the label levels.
    pub fn label_pixel_counts(&self) -> Vec<usize> {
        self.labels
            .iter()
            .flatten()
            .map(|l| l.labels.iter().filter(|&&v| v != IGNORE_LABEL).count())
            .collect()
    }
}

/// Checks that every label is a class id or the ignore label.
pub fn validate_labels(labels: &LabelMap, num_classes: usize) -> Result<()> {
    match labels
        .labels
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
    {
        Some(&label) => Err(LossError::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Nearest-neighbour ground-truth pyramid for decoder levels at `1/2^k`
/// resolution, `k = M..1`.
pub fn build_gt_pyramid(
    depth_gt: Option<&DepthMap>,
    semantic_gt: Option<&LabelMap>,
    num_levels: usize,
    num_classes: usize,
) -> Result<GroundTruthPyramid> {
    if let Some(labels) = semantic_gt {
        validate_labels(labels, num_classes)?;
    }
    let factors: Vec<usize> = (1..=num_levels).rev().map(|k| 1 << k).collect();
    Ok(GroundTruthPyramid {
        depth: depth_gt.map(|d| factors.iter().map(|&f| d.downsample(f)).collect()),
        labels: semantic_gt.map(|s| factors.iter().map(|&f| s.downsample(f)).collect()),
    })
}

/// Value of a loss term plus the number of predictions floored at [`MIN_DEPTH`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthLossValue {
    pub value: f64,
    pub clamped: usize,
}

/// `Σ_l 2^(l+1) / N_p^l · Σ_i |ln d_i − ln d̂_i|` over pixels valid in both maps.
pub fn depth_loss(
    pred: &[DepthMap],
    gt: &GroundTruthPyramid,
    cfg: &LossConfig,
) -> Result<DepthLossValue> {
    let gt_depth = gt
        .depth
        .as_ref()
        .ok_or(LossError::Shape("ground truth has no depth".into()))?;
    if pred.len() != gt_depth.len() {
        return Err(LossError::Shape(format!(
            "{} predicted levels vs {} ground-truth levels",
            pred.len(),
            gt_depth.len()
        )));
    }
    let m = pred.len();
    let mut total = 0.0;
    let mut any = false;
    let mut clamped = 0;
    for (idx, (p, t)) in pred.iter().zip(gt_depth).enumerate() {
        if (p.width, p.height) != (t.width, t.height) {
            return Err(LossError::Shape(format!("level {idx} resolution mismatch")));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..p.values.len() {
            if !(p.valid[i] && t.valid[i]) {
                continue;
            }
            let mut d_hat = p.values[i];
            if d_hat < MIN_DEPTH {
                d_hat = MIN_DEPTH;
                clamped += 1;
            }
            sum += (t.values[i].ln() - d_hat.ln()).abs();
            count += 1;
        }
        if count > 0 {
            any = true;
            total += cfg.depth_level_weight(idx, m) * sum / count as f64;
        }
    }
    if !any {
        return Err(LossError::DegenerateBatch("depth"));
    }
    Ok(DepthLossValue {
        value: total,
        clamped,
    })
}

/// `Σ_l 1/N_p^l · Σ −ln(p_target / Σ_j p_j)` over non-ignored pixels, from
/// per-level probability maps.
pub fn semantic_loss(pred: &[Tensor], gt: &GroundTruthPyramid) -> Result<f64> {
    semantic_loss_impl(pred, gt, |t, i, target| {
        let c = t.channels();
        let n = t.plane_len();
        let total: f64 = (0..c).map(|j| t.data()[j * n + i]).sum();
        -(t.data()[target * n + i] / total).ln()
    })
}

/// Same loss from unnormalized logits, via a log-sum-exp.
pub fn semantic_loss_from_logits(logits: &[Tensor], gt: &GroundTruthPyramid) -> Result<f64> {
    semantic_loss_impl(logits, gt, |t, i, target| {
        let c = t.channels();
        let n = t.plane_len();
        let m = (0..c).map(|j| t.data()[j * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|j| (t.data()[j * n + i] - m).exp()).sum::<f64>().ln();
        lse - t.data()[target * n + i]
    })
}

fn semantic_loss_impl(
    pred: &[Tensor],
    gt: &GroundTruthPyramid,
    pixel_loss: impl Fn(&Tensor, usize, usize) -> f64,
) -> Result<f64> {
    let labels = gt
        .labels
        .as_ref()
        .ok_or(LossError::Shape("ground truth has no labels".into()))?;
    if pred.len() != labels.len() {
        return Err(LossError::Shape(format!(
            "{} predicted levels vs {} ground-truth levels",
            pred.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut any = false;
    for (idx, (p, t)) in pred.iter().zip(labels).enumerate() {
        if (p.width(), p.height()) != (t.width, t.height) {
            return Err(LossError::Shape(format!("level {idx} resolution mismatch")));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &l) in t.labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= p.channels() {
                return Err(LossError::LabelOutOfRange {
                    label: l,
                    num_classes: p.channels(),
                });
            }
            sum += pixel_loss(p, i, l as usize);
            count += 1;
        }
        if count > 0 {
            any = true;
            total += sum / count as f64;
        }
    }
    if !any {
        return Err(LossError::DegenerateBatch("semantic"));
    }
    Ok(total)
}

/// `L_depth + w · L_semantic`.
pub fn total_loss(depth: f64, semantic: f64, cfg: &LossConfig) -> Result<f64> {
    if !(depth.is_finite() && semantic.is_finite() && depth >= 0.0 && semantic >= 0.0) {
        return Err(LossError::Divergence { depth, semantic });
    }
    Ok(depth + cfg.semantic_weight * semantic)
}

/// One predicted depth level inside a graph.
#[derive(Debug, Clone)]
pub struct DepthLevelVar {
    pub depth: Var,
    pub valid: Arc<Vec<bool>>,
}

/// Graph form of [`depth_loss`].
pub fn depth_loss_var(
    g: &mut Graph,
    pred: &[DepthLevelVar],
    gt: &GroundTruthPyramid,
    cfg: &LossConfig,
) -> Result<Var> {
    let gt_depth = gt
        .depth
        .as_ref()
        .ok_or(LossError::Shape("ground truth has no depth".into()))?;
    if pred.len() != gt_depth.len() {
        return Err(LossError::Shape("depth level count mismatch".into()));
    }
    let m = pred.len();
    let mut terms = Vec::new();
    for (idx, (p, t)) in pred.iter().zip(gt_depth).enumerate() {
        let [_, h, w] = g.value(p.depth).shape();
        if (w, h) != (t.width, t.height) {
            return Err(LossError::Shape(format!("level {idx} resolution mismatch")));
        }
        let mask: Vec<bool> = p.valid.iter().zip(&t.valid).map(|(a, b)| *a && *b).collect();
        let count = mask.iter().filter(|&&v| v).count();
        if count == 0 {
            continue;
        }
        let scale = cfg.depth_level_weight(idx, m) / count as f64;
        terms.push(g.log_l1(p.depth, Arc::new(t.clone()), Arc::new(mask), scale));
    }
    if terms.is_empty() {
        return Err(LossError::DegenerateBatch("depth"));
    }
    Ok(g.sum(&terms))
}

/// Graph form of [`semantic_loss_from_logits`], taking per-level log-probabilities.
pub fn semantic_loss_var(g: &mut Graph, log_probs: &[Var], gt: &GroundTruthPyramid) -> Result<Var> {
    let labels = gt
        .labels
        .as_ref()
        .ok_or(LossError::Shape("ground truth has no labels".into()))?;
    if log_probs.len() != labels.len() {
        return Err(LossError::Shape("semantic level count mismatch".into()));
    }
    let mut terms = Vec::new();
    for (idx, (&lp, t)) in log_probs.iter().zip(labels).enumerate() {
        let [c, h, w] = g.value(lp).shape();
        if (w, h) != (t.width, t.height) {
            return Err(LossError::Shape(format!("level {idx} resolution mismatch")));
        }
        validate_labels(t, c)?;
        let count = t.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        if count == 0 {
            continue;
        }
        terms.push(g.nll(lp, Arc::new(t.clone()), 1.0 / count as f64));
    }
    if terms.is_empty() {
        return Err(LossError::DegenerateBatch("semantic"));
    }
    Ok(g.sum(&terms))
}
