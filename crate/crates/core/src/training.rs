//! End-to-end training with Adam, per-epoch checkpoints, resumption and
//! validation-based checkpoint selection.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::data::{augment, AugmentationConfig, FrameSequenceSample};
use crate::geometry::{DepthMap, LabelMap};
use crate::losses::{build_gt_pyramid, LossConfig, LossError};
use crate::metrics::{ConfusionMatrix, DepthAccumulator, EvaluationReport, MetricsError, DEFAULT_DEPTH_CAP};
use crate::model::{
    config_hash, ArchitectureConfig, Checkpoint, CheckpointError, CoSemDepth, ModelError, ModelKind,
};
use crate::params::ParamId;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("diverged at step {step}: depth loss {depth}, semantic loss {semantic}")]
    Divergence { step: u64, depth: f64, semantic: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Learning rate in effect from `step` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub step: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lr_schedule: Vec<LrStep>,
    /// Frames per sequence window.
    pub window: usize,
    /// Write a checkpoint after every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    pub model_kind: ModelKind,
    pub loss: LossConfig,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentationConfig>,
    pub architecture: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 3,
            epochs: 1,
            max_steps: None,
            seed: 0,
            clip_norm: Some(10.0),
            lr_schedule: Vec::new(),
            window: 3,
            checkpoint_every: 1,
            model_kind: ModelKind::Joint,
            loss: LossConfig::default(),
            augmentation: Some(AugmentationConfig::default()),
            architecture: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.lr_schedule.iter().any(|s| !(s.learning_rate > 0.0)) {
            return bad("scheduled learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm must be positive");
            }
        }
        if let Some(a) = &self.augmentation {
            a.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        }
        self.architecture.validate()?;
        Ok(())
    }

    /// Learning rate at `step` (0-based) under the schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|s| s.step <= step)
            .max_by_key(|s| s.step)
            .map_or(self.learning_rate, |s| s.learning_rate)
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: HashMap<ParamId, Tensor>,
    pub v: HashMap<ParamId, Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &CoSemDepth) -> Self {
        let zeros = |id: ParamId| {
            let [c, h, w] = model.params.get(id).shape();
            (id, Tensor::zeros(c, h, w))
        };
        Self {
            m: model.params.ids().map(zeros).collect(),
            v: model.params.ids().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        model: &mut CoSemDepth,
        grads: &HashMap<ParamId, Tensor>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let m = self.m.get_mut(&id).expect("moment for every parameter");
            let v = self.v.get_mut(&id).expect("moment for every parameter");
            let p = model.params.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub depth: f64,
    pub semantic: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!(
            "{}, {:.12e}, {:.12e}, {:.12e}, {:e}, {:.3}",
            self.step, self.depth, self.semantic, self.total, self.lr, self.wall_ms
        )
    }
}

pub const LOG_HEADER: &str = "step, L_depth, L_semantic, L_total, lr, wall_ms";

/// Record of a written checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_abs_rel: Option<f64>,
    pub config_hash: String,
    pub path: Option<PathBuf>,
}

/// Per-sample loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub depth: Option<f64>,
    pub semantic: Option<f64>,
    pub total: f64,
}

/// Loss and gradients of one sample.
pub fn sample_gradients(
    model: &CoSemDepth,
    sample: &FrameSequenceSample,
    loss_cfg: &LossConfig,
) -> Result<(SampleLoss, HashMap<ParamId, Tensor>)> {
    let (loss, g, total) = sample_graph(model, sample, loss_cfg)?;
    let grads = g.backward(total).into_map();
    Ok((loss, grads))
}

/// Loss of one sample without gradients.
pub fn sample_loss(model: &CoSemDepth, sample: &FrameSequenceSample, loss_cfg: &LossConfig) -> Result<SampleLoss> {
    Ok(sample_graph(model, sample, loss_cfg)?.0)
}

fn sample_graph(
    model: &CoSemDepth,
    sample: &FrameSequenceSample,
    loss_cfg: &LossConfig,
) -> Result<(SampleLoss, Graph, crate::autograd::Var)> {
    let target = sample.target();
    let gt = build_gt_pyramid(
        if model.kind.has_depth() { target.depth.as_ref() } else { None },
        if model.kind.has_semantic() { target.labels.as_ref() } else { None },
        model.config.num_levels,
        model.config.num_classes,
    )
    .map_err(ModelError::from)?;
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &sample.to_input())?;
    let l = model.loss(&mut g, &out, &gt, loss_cfg)?;
    let loss = SampleLoss {
        depth: l.depth.map(|v| g.scalar(v)),
        semantic: l.semantic.map(|v| g.scalar(v)),
        total: g.scalar(l.total),
    };
    Ok((loss, g, l.total))
}

/// Mean total loss over `samples` without augmentation.
pub fn validation_loss(model: &CoSemDepth, samples: &[FrameSequenceSample], loss_cfg: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += match sample_loss(model, s, loss_cfg) {
            Ok(l) => l.total,
            Err(TrainError::Model(ModelError::Loss(LossError::DegenerateBatch(_)))) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(sum / samples.len() as f64)
}

/// Depth and segmentation metrics of the target frame of every sample at
/// input resolution.
pub fn evaluate(model: &CoSemDepth, samples: &[FrameSequenceSample], cap: f64) -> Result<EvaluationReport> {
    evaluate_with(samples, model.config.num_classes, cap, |s| {
        let out = model.forward_joint(&s.to_input())?;
        Ok((out.depth, out.labels))
    })
}

/// [`evaluate`] over an arbitrary predictor returning the target frame's
/// depth and label maps.
pub fn evaluate_with(
    samples: &[FrameSequenceSample],
    num_classes: usize,
    cap: f64,
    mut predict: impl FnMut(&FrameSequenceSample) -> Result<(Option<DepthMap>, Option<LabelMap>)>,
) -> Result<EvaluationReport> {
    let mut depth = DepthAccumulator::new(cap)?;
    let mut conf = ConfusionMatrix::new(num_classes);
    let (mut has_depth, mut has_sem) = (false, false);
    for s in samples {
        let (pd, pl) = predict(s)?;
        let t = s.target();
        if let (Some(p), Some(g)) = (&pd, &t.depth) {
            depth.add(p, g)?;
            has_depth = true;
        }
        if let (Some(p), Some(g)) = (&pl, &t.labels) {
            conf.add(p, g)?;
            has_sem = true;
        }
    }
    Ok(EvaluationReport {
        frames: samples.len() as u64,
        depth: if has_depth { Some(depth.report()?) } else { None },
        segmentation: if has_sem { Some(conf.report()?) } else { None },
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CoSemDepth,
    pub adam: Adam,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<StepLog>,
    log_file: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
}

const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_AUGMENT: u64 = 2 << 40;

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CoSemDepth::new(cfg.architecture.clone(), cfg.model_kind, cfg.seed)?;
        let adam = Adam::new(&model);
        Ok(Self {
            cfg,
            model,
            adam,
            step: 0,
            epoch: 0,
            log: Vec::new(),
            log_file: None,
            checkpoint_dir: None,
        })
    }

    /// Appends log lines to `path`; writes the header if the file is new.
    pub fn with_log_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.log_file = Some(path.into());
        self
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, mut cfg: TrainConfig) -> Result<Self> {
        let stored = ck
            .metadata
            .get("train_config")
            .ok_or_else(|| TrainError::Config("checkpoint has no training state".into()))?;
        let stored: TrainConfig =
            serde_json::from_str(stored).map_err(|e| TrainError::Config(e.to_string()))?;
        // only the run length may change on resume
        cfg.epochs = cfg.epochs.max(stored.epochs);
        let (epochs, max_steps) = (cfg.epochs, cfg.max_steps);
        cfg = TrainConfig {
            epochs,
            max_steps,
            ..stored
        };
        cfg.validate()?;
        let model = ck.to_model()?;
        let mut adam = Adam::new(&model);
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id);
            for (prefix, slot) in [("adam_m/", &mut adam.m), ("adam_v/", &mut adam.v)] {
                let t = ck
                    .arrays
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| CheckpointError::Mismatch(format!("missing {prefix}{name}")))?;
                if t.shape() != model.params.get(id).shape() {
                    return Err(CheckpointError::Mismatch(format!("{prefix}{name} has the wrong shape")).into());
                }
                slot.insert(id, t.clone());
            }
        }
        let meta_num = |k: &str| -> Result<u64> {
            ck.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Config(format!("checkpoint metadata lacks {k}")))
        };
        adam.t = meta_num("adam_t")?;
        let step = meta_num("step")?;
        let epoch = meta_num("epoch")? as usize;
        Ok(Self {
            cfg,
            model,
            adam,
            step,
            epoch,
            log: Vec::new(),
            log_file: None,
            checkpoint_dir: None,
        })
    }

    /// Model, optimizer state and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for id in self.model.params.ids() {
            let name = self.model.params.name(id);
            ck.arrays.insert(format!("adam_m/{name}"), self.adam.m[&id].clone());
            ck.arrays.insert(format!("adam_v/{name}"), self.adam.v[&id].clone());
        }
        let meta: BTreeMap<String, String> = [
            ("step", self.step.to_string()),
            ("epoch", self.epoch.to_string()),
            ("adam_t", self.adam.t.to_string()),
            (
                "train_config",
                serde_json::to_string(&self.cfg).expect("config serializes"),
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        ck.metadata.extend(meta);
        ck
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STREAM_SHUFFLE + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&FrameSequenceSample]) -> Result<StepLog> {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STREAM_AUGMENT + self.step);
        let mut grads: HashMap<ParamId, Tensor> = HashMap::new();
        let (mut depth, mut sem, mut total) = (0.0, 0.0, 0.0);
        let n = batch.len() as f64;
        for &sample in batch {
            let s = match &self.cfg.augmentation {
                Some(a) => augment(sample, a, &mut rng),
                None => sample.clone(),
            };
            let (loss, g) = match sample_gradients(&self.model, &s, &self.cfg.loss) {
                Ok(x) => x,
                Err(TrainError::Model(ModelError::Loss(LossError::DegenerateBatch(_)))) => {
                    log::warn!("step {}: sample has no valid pixels for any loss term", self.step);
                    continue;
                }
                Err(e) => return Err(e),
            };
            if loss.depth.is_none() && self.model.kind.has_depth() {
                log::warn!("step {}: depth term skipped for a degenerate sample", self.step);
            }
            if !loss.total.is_finite() {
                return Err(TrainError::Divergence {
                    step: self.step,
                    depth: loss.depth.unwrap_or(f64::NAN),
                    semantic: loss.semantic.unwrap_or(f64::NAN),
                });
            }
            depth += loss.depth.unwrap_or(0.0) / n;
            sem += loss.semantic.unwrap_or(0.0) / n;
            total += loss.total / n;
            for (id, t) in g {
                let t = t.map(|v| v / n);
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(id, t);
                    }
                }
            }
        }
        // fixed summation order keeps runs bit-identical
        let norm = self
            .model
            .params
            .ids()
            .filter_map(|id| grads.get(&id))
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Divergence {
                step: self.step,
                depth,
                semantic: sem,
            });
        }
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                let s = c / norm;
                for t in grads.values_mut() {
                    *t = t.map(|v| v * s);
                }
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.adam.step(&mut self.model, &grads, lr, &self.cfg);
        let entry = StepLog {
            step: self.step,
            depth,
            semantic: sem,
            total,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        self.log.push(entry);
        if let Some(p) = &self.log_file {
            let fresh = !p.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            writeln!(f, "{}", entry.to_line())?;
        }
        Ok(entry)
    }

    /// Runs the remaining epochs (or steps), checkpointing and validating
    /// after every `checkpoint_every` epochs and at the end.
    pub fn train(
        &mut self,
        train: &[FrameSequenceSample],
        val: &[FrameSequenceSample],
    ) -> Result<Vec<CheckpointMeta>> {
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let per_epoch = self.steps_per_epoch(train.len());
        let mut metas = Vec::new();
        // a mid-epoch resume skips the batches already consumed
        let mut skip = self.step - self.epoch as u64 * per_epoch;
        while self.epoch < self.cfg.epochs && !self.done() {
            let order = self.epoch_order(self.epoch, train.len());
            for chunk in order.chunks(self.cfg.batch_size).skip(skip as usize) {
                if self.done() {
                    break;
                }
                let batch: Vec<&FrameSequenceSample> = chunk.iter().map(|&i| &train[i]).collect();
                self.train_step(&batch)?;
            }
            skip = 0;
            if self.step == (self.epoch as u64 + 1) * per_epoch {
                self.epoch += 1;
            } else {
                break;
            }
            let last = self.epoch == self.cfg.epochs || self.done();
            if self.epoch.is_multiple_of(self.cfg.checkpoint_every) || last {
                metas.push(self.save_and_validate(val)?);
            }
        }
        if metas.is_empty() || metas.last().is_some_and(|m| m.step != self.step) {
            metas.push(self.save_and_validate(val)?);
        }
        Ok(metas)
    }

    fn save_and_validate(&self, val: &[FrameSequenceSample]) -> Result<CheckpointMeta> {
        let path = match &self.checkpoint_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let p = dir.join(format!("step{:08}.ckpt", self.step));
                self.checkpoint().save(&p)?;
                Some(p)
            }
            None => None,
        };
        let (val_loss, val_miou, val_abs_rel) = if val.is_empty() {
            (None, None, None)
        } else {
            let report = evaluate(&self.model, val, DEFAULT_DEPTH_CAP)?;
            (
                Some(validation_loss(&self.model, val, &self.cfg.loss)?),
                report.segmentation.map(|s| s.miou),
                report.depth.map(|d| d.abs_rel),
            )
        };
        Ok(CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            val_loss,
            val_miou,
            val_abs_rel,
            config_hash: config_hash(&self.model.config),
            path,
        })
    }
}

/// Lowest validation loss; ties go to the earliest epoch. Checkpoints
/// without a validation loss rank last.
pub fn select_best(metas: &[CheckpointMeta]) -> Option<&CheckpointMeta> {
    metas.iter().min_by(|a, b| {
        let key = |m: &CheckpointMeta| m.val_loss.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.epoch.cmp(&b.epoch))
    })
}

/// Re-evaluates every checkpoint on `val` and returns the best one.
pub fn validate_and_select(
    metas: &[CheckpointMeta],
    val: &[FrameSequenceSample],
    loss_cfg: &LossConfig,
) -> Result<CheckpointMeta> {
    if metas.is_empty() {
        return Err(TrainError::Config("no checkpoints to select from".into()));
    }
    let mut scored = Vec::with_capacity(metas.len());
    for m in metas {
        let mut m = m.clone();
        if let Some(p) = &m.path {
            let ck = Checkpoint::load(p)?;
            if ck.metadata.get("config_hash") != Some(&m.config_hash) {
                return Err(CheckpointError::Mismatch(format!("{} has a different config", p.display())).into());
            }
            m.val_loss = Some(validation_loss(&ck.to_model()?, val, loss_cfg)?);
        }
        scored.push(m);
    }
    Ok(select_best(&scored).expect("non-empty").clone())
}

/// Reads a training log written by [`Trainer`], skipping the header.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty() && *l != LOG_HEADER)
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| TrainError::Config(format!("bad log line {l:?}")))
            };
            Ok(StepLog {
                step: num(0)? as u64,
                depth: num(1)?,
                semantic: num(2)?,
                total: num(3)?,
                lr: num(4)?,
                wall_ms: num(5)?,
            })
        })
        .collect()
}
