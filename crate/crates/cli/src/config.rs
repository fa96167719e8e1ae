//! Run configuration file: `[architecture]`, `[loss]`, `[training]`, `[data]`
//! and `[output]` tables. Every key is optional.

use std::fs;
use std::path::{Path, PathBuf};

use cosemdepth::data::{AugmentationConfig, ClassMapping, SceneConfig};
use cosemdepth::losses::LossConfig;
use cosemdepth::metrics::DEFAULT_DEPTH_CAP;
use cosemdepth::model::{ArchitectureConfig, ModelKind};
use cosemdepth::training::{LrStep, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub loss: LossConfig,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 means no limit.
    pub max_steps: u64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub lr_schedule: Vec<LrStep>,
    pub checkpoint_every: usize,
    pub model_kind: ModelKind,
    pub augment: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_steps: 0,
            seed: t.seed,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            lr_schedule: t.lr_schedule,
            checkpoint_every: t.checkpoint_every,
            model_kind: t.model_kind,
            augment: true,
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding `train.txt`, `val.txt`, `test.txt`.
    pub root: PathBuf,
    /// Frames per sequence window.
    pub window: usize,
    /// Ground-truth labels use the 14 source classes and are remapped.
    pub midair_labels: bool,
    /// Target class receiving the source Construction class.
    pub construction_target: u8,
    /// Scene used by `synth` and `bench`.
    pub synthetic: SceneConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            window: 3,
            midair_labels: false,
            construction_target: cosemdepth::data::class_ids::OTHERS,
            synthetic: SceneConfig {
                val_trajectories: 1,
                test_trajectories: 1,
                ..SceneConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory for `train`.
    pub dir: PathBuf,
    /// Depth cap in meters for metrics and depth visualizations.
    pub depth_cap: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }
}

impl RunConfig {
    /// Parses `text`; errors carry `source:line:column`.
    pub fn parse(text: &str, source: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let (line, col) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((1, 1));
            CliError::Config(format!(
                "{}:{line}:{col}: {}",
                source.display(),
                e.message()
            ))
        })
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.root, &mut cfg.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
            seed: t.seed,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            lr_schedule: t.lr_schedule.clone(),
            window: self.data.window,
            checkpoint_every: t.checkpoint_every,
            model_kind: t.model_kind,
            loss: self.loss,
            augmentation: t.augment.then_some(t.augmentation),
            architecture: self.architecture.clone(),
        }
    }

    /// Label remapping for ground truth, if the dataset uses source ids.
    pub fn class_mapping(&self) -> Result<Option<ClassMapping>, CliError> {
        if self.data.midair_labels {
            Ok(Some(ClassMapping::midair(self.data.construction_target)?))
        } else {
            Ok(None)
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}
