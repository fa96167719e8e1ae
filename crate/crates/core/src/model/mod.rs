//! The joint network: a shared pyramidal encoder feeding a motion-conditioned
//! parallax decoder and a single-image semantic decoder.

mod checkpoint;
mod config;
mod depth;
mod encoder;
mod layers;
mod semantic;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint, CheckpointError};
pub use config::ArchitectureConfig;
pub use depth::{DepthDecoder, DepthFrameVars, DepthLevelVars};
pub use encoder::{dinl_normalize, Encoder, EncoderLevel};
pub use layers::{Conv, Refiner};
pub use semantic::{
    preprocess_var, semantic_preprocess, SemanticDecoder, SemanticLevelState, SemanticLevelVars,
};

use crate::autograd::{Graph, Var};
use crate::geometry::{
    parallax_to_depth, reproject, warp_map, CameraIntrinsics, DepthMap, GeometryError, LabelMap,
    ParallaxMap, Se3, WarpMode,
};
use crate::losses::{
    depth_loss_var, semantic_loss_var, DepthLevelVar, GroundTruthPyramid, LossConfig, LossError,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which decoders are instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Joint,
    DepthOnly,
    SemanticOnly,
}

impl ModelKind {
    pub fn has_depth(self) -> bool {
        self != ModelKind::SemanticOnly
    }

    pub fn has_semantic(self) -> bool {
        self != ModelKind::DepthOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Joint => "joint",
            ModelKind::DepthOnly => "depth_only",
            ModelKind::SemanticOnly => "semantic_only",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(ModelKind::Joint),
            "depth_only" => Ok(ModelKind::DepthOnly),
            "semantic_only" => Ok(ModelKind::SemanticOnly),
            _ => Err(ModelError::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Previous semantic prediction plus what is needed to warp it into the
/// current frame.
#[derive(Debug, Clone)]
pub struct SemanticPrior {
    /// `N_c × H × W` probabilities of the previous frame at input resolution.
    pub previous: Tensor,
    /// Maps current-frame points into the previous camera.
    pub motion: Se3,
    /// Ground-truth depth of the current frame at input resolution.
    pub depth: DepthMap,
}

/// A window of consecutive frames, oldest first.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    /// `3 × H × W` images in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `motions[j]` maps points of frame `j + 1` into frame `j`.
    pub motions: Vec<Se3>,
    pub intrinsics: CameraIntrinsics,
    pub semantic_prior: Option<SemanticPrior>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardFlags {
    /// Only one frame was given; it served as its own predecessor.
    pub first_frame_duplicated: bool,
    /// The target frame's baseline was below the minimum; depth is invalid.
    pub degenerate_baseline: bool,
}

/// Graph handles for the target (last) frame.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub depth: Option<DepthFrameVars>,
    /// Depth per level, coarsest first, ready for the loss.
    pub depth_levels: Option<Vec<DepthLevelVar>>,
    pub semantic: Option<Vec<SemanticLevelVars>>,
    pub flags: ForwardFlags,
}

/// Intermediate maps of one decoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub parallax: Option<ParallaxMap>,
    pub depth: Option<DepthMap>,
    pub semantic: Option<SemanticLevelState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    /// Depth at input resolution.
    pub depth: Option<DepthMap>,
    /// Class probabilities at input resolution.
    pub probabilities: Option<Tensor>,
    pub labels: Option<LabelMap>,
    /// Decoder levels, coarsest first.
    pub levels: Vec<LevelOutput>,
    pub flags: ForwardFlags,
}

/// Loss graph nodes. Terms are `None` when absent from the ground truth or
/// when no pixel is valid.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub depth: Option<Var>,
    pub semantic: Option<Var>,
    pub total: Var,
}

/// Previous-frame state carried between calls of [`CoSemDepth::stream_step`].
#[derive(Debug, Clone, Default)]
pub struct StreamContext {
    pyramid: Option<Vec<Tensor>>,
    parallax: Option<Vec<Tensor>>,
}

impl StreamContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone)]
pub struct CoSemDepth {
    pub config: ArchitectureConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub depth: Option<DepthDecoder>,
    pub semantic: Option<SemanticDecoder>,
}

impl CoSemDepth {
    /// Builds a network with seeded fan-in uniform weights. Parameters are
    /// created in the order encoder, depth decoder, semantic decoder.
    pub fn new(config: ArchitectureConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let depth = kind
            .has_depth()
            .then(|| DepthDecoder::new(&mut params, &mut rng, &config));
        let semantic = kind
            .has_semantic()
            .then(|| SemanticDecoder::new(&mut params, &mut rng, &config));
        Ok(Self {
            config,
            kind,
            params,
            encoder,
            depth,
            semantic,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encoder_parameters(&self) -> usize {
        self.params.num_scalars_with_prefix("encoder.")
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.channels() != 3 {
            return Err(ModelError::Shape(format!(
                "expected a 3-channel image, got {}",
                image.channels()
            )));
        }
        self.config.validate_input(image.width(), image.height())
    }

    fn check_intrinsics(&self, image: &Tensor, intr: &CameraIntrinsics) -> Result<()> {
        intr.validate()?;
        if (intr.width, intr.height) != (image.width(), image.height()) {
            return Err(ModelError::Shape(format!(
                "intrinsics are for {}x{}, image is {}x{}",
                intr.width,
                intr.height,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Feature pyramid of one image inside `g`, finest first.
    pub fn encode_var(&self, g: &mut Graph, image: &Tensor) -> Result<Vec<Var>> {
        self.check_image(image)?;
        let x = g.input(image.clone());
        Ok(self.encoder.forward(g, &self.params, x))
    }

    /// Feature pyramid of one image, finest (level 1) first.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let levels = self.encode_var(&mut g, image)?;
        Ok(levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Builds the forward pass for the last frame of `seq`.
    pub fn forward_graph(&self, g: &mut Graph, seq: &SequenceInput) -> Result<GraphOutput> {
        let n = seq.frames.len();
        if n == 0 {
            return Err(ModelError::Sequencing("empty frame sequence".into()));
        }
        if seq.motions.len() + 1 != n {
            return Err(ModelError::Sequencing(format!(
                "{n} frames need {} motions, got {}",
                n - 1,
                seq.motions.len()
            )));
        }
        for m in &seq.motions {
            m.validate()?;
        }
        let target = &seq.frames[n - 1];
        self.check_image(target)?;
        self.check_intrinsics(target, &seq.intrinsics)?;
        for f in &seq.frames {
            if f.shape() != target.shape() {
                return Err(ModelError::Shape("frames differ in resolution".into()));
            }
        }
        let mut flags = ForwardFlags {
            first_frame_duplicated: n == 1,
            ..ForwardFlags::default()
        };

        let mut depth_out = None;
        let mut depth_levels = None;
        let target_pyramid;
        if let Some(decoder) = &self.depth {
            let pyramids: Vec<Vec<Var>> = seq
                .frames
                .iter()
                .map(|f| self.encode_var(g, f))
                .collect::<Result<_>>()?;
            // the first frame is its own predecessor under identity motion
            let mut frame = decoder.forward(
                g,
                &self.params,
                &self.config,
                &pyramids[0],
                &pyramids[0],
                None,
                &Se3::identity(),
                &seq.intrinsics,
            );
            for j in 1..n {
                let prev_par = frame.parallax_finest_first();
                frame = decoder.forward(
                    g,
                    &self.params,
                    &self.config,
                    &pyramids[j],
                    &pyramids[j - 1],
                    Some(&prev_par),
                    &seq.motions[j - 1],
                    &seq.intrinsics,
                );
            }
            flags.degenerate_baseline = frame.degenerate_baseline;
            depth_levels = Some(depth_level_vars(g, &frame));
            depth_out = Some(frame);
            target_pyramid = pyramids.into_iter().next_back().expect("non-empty");
        } else {
            target_pyramid = self.encode_var(g, target)?;
        }

        let semantic = match &self.semantic {
            Some(decoder) => {
                let priors = self.prior_vars(g, seq.semantic_prior.as_ref(), &seq.intrinsics)?;
                Some(decoder.forward(
                    g,
                    &self.params,
                    &self.config,
                    &target_pyramid,
                    priors.as_deref(),
                )?)
            }
            None => None,
        };
        Ok(GraphOutput {
            depth: depth_out,
            depth_levels,
            semantic,
            flags,
        })
    }

    fn prior_vars(
        &self,
        g: &mut Graph,
        prior: Option<&SemanticPrior>,
        intr: &CameraIntrinsics,
    ) -> Result<Option<Vec<Var>>> {
        if !self.config.use_semantic_time_warp {
            return Ok(None);
        }
        let prior = prior.ok_or_else(|| {
            ModelError::Config(
                "semantic time warp needs the previous prediction, motion and ground-truth depth"
                    .into(),
            )
        })?;
        if prior.previous.channels() != self.config.num_classes {
            return Err(ModelError::Shape(format!(
                "prior has {} classes, expected {}",
                prior.previous.channels(),
                self.config.num_classes
            )));
        }
        let mut vars = Vec::with_capacity(self.config.num_levels);
        for l in (1..=self.config.num_levels).rev() {
            let f = 1 << l;
            let (w, h) = (intr.width / f, intr.height / f);
            let warped = warp_semantic_prior(
                &downsample_tensor(&prior.previous, f),
                &prior.depth.downsample(f),
                &prior.motion,
                &intr.scaled_to(w, h),
            )?;
            vars.push(g.input(warped));
        }
        Ok(Some(vars))
    }

    /// Multi-level loss of the target frame.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &GraphOutput,
        gt: &GroundTruthPyramid,
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        let depth = match (&out.depth_levels, &gt.depth) {
            (Some(levels), Some(_)) => match depth_loss_var(g, levels, gt, cfg) {
                Ok(v) => Some(v),
                Err(LossError::DegenerateBatch(_)) => None,
                Err(e) => return Err(e.into()),
            },
            _ => None,
        };
        let semantic = match (&out.semantic, &gt.labels) {
            (Some(levels), Some(_)) => {
                let lp: Vec<Var> = levels.iter().map(|s| s.log_probs).collect();
                match semantic_loss_var(g, &lp, gt) {
                    Ok(v) => Some(v),
                    Err(LossError::DegenerateBatch(_)) => None,
                    Err(e) => return Err(e.into()),
                }
            }
            _ => None,
        };
        let total = match (depth, semantic) {
            (Some(d), Some(s)) => {
                let ws = g.scale(s, cfg.semantic_weight);
                g.add(d, ws)
            }
            (Some(d), None) => d,
            (None, Some(s)) => g.scale(s, cfg.semantic_weight),
            (None, None) => return Err(LossError::DegenerateBatch("total").into()),
        };
        Ok(LossVars {
            depth,
            semantic,
            total,
        })
    }

    /// Inference over a window; outputs describe the last frame.
    pub fn forward_joint(&self, seq: &SequenceInput) -> Result<JointOutput> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, seq)?;
        Ok(self.collect_outputs(&g, &out))
    }

    /// Semantic decoder alone on one image. `prior` is required exactly when
    /// the time-warp variant is enabled.
    pub fn forward_semantic_single(
        &self,
        image: &Tensor,
        intr: Option<&CameraIntrinsics>,
        prior: Option<&SemanticPrior>,
    ) -> Result<JointOutput> {
        let decoder = self
            .semantic
            .as_ref()
            .ok_or_else(|| ModelError::Config("model has no semantic decoder".into()))?;
        let mut g = Graph::new();
        let pyramid = self.encode_var(&mut g, image)?;
        let priors = if self.config.use_semantic_time_warp {
            let intr = intr.ok_or_else(|| {
                ModelError::Config("semantic time warp needs camera intrinsics".into())
            })?;
            self.check_intrinsics(image, intr)?;
            self.prior_vars(&mut g, prior, intr)?
        } else {
            None
        };
        let semantic = decoder.forward(&mut g, &self.params, &self.config, &pyramid, priors.as_deref())?;
        let out = GraphOutput {
            depth: None,
            depth_levels: None,
            semantic: Some(semantic),
            flags: ForwardFlags::default(),
        };
        Ok(self.collect_outputs(&g, &out))
    }

    /// Processes one frame of a stream. `motion` maps the current frame into
    /// the previous one and is ignored (and may be absent) on the first call.
    pub fn stream_step(
        &self,
        ctx: &mut StreamContext,
        image: &Tensor,
        motion: Option<&Se3>,
        intr: &CameraIntrinsics,
    ) -> Result<JointOutput> {
        self.check_image(image)?;
        self.check_intrinsics(image, intr)?;
        let mut g = Graph::new();
        let curr = self.encode_var(&mut g, image)?;
        let mut flags = ForwardFlags::default();
        let mut depth = None;
        let mut depth_levels = None;
        if let Some(decoder) = &self.depth {
            let (prev, prev_par, motion) = match (&ctx.pyramid, motion) {
                (Some(p), Some(m)) => {
                    m.validate()?;
                    let prev: Vec<Var> = p.iter().map(|t| g.input(t.clone())).collect();
                    let par = ctx
                        .parallax
                        .as_ref()
                        .map(|pp| pp.iter().map(|t| g.input(t.clone())).collect::<Vec<_>>());
                    (prev, par, *m)
                }
                (Some(_), None) => {
                    return Err(ModelError::Sequencing("missing motion to the previous frame".into()))
                }
                (None, _) => {
                    flags.first_frame_duplicated = true;
                    (curr.clone(), None, Se3::identity())
                }
            };
            let frame = decoder.forward(
                &mut g,
                &self.params,
                &self.config,
                &curr,
                &prev,
                prev_par.as_deref(),
                &motion,
                intr,
            );
            flags.degenerate_baseline = frame.degenerate_baseline;
            ctx.parallax = Some(
                frame
                    .parallax_finest_first()
                    .iter()
                    .map(|&v| g.value(v).clone())
                    .collect(),
            );
            depth_levels = Some(depth_level_vars(&mut g, &frame));
            depth = Some(frame);
        }
        ctx.pyramid = Some(curr.iter().map(|&v| g.value(v).clone()).collect());
        let semantic = match &self.semantic {
            Some(decoder) => Some(decoder.forward(&mut g, &self.params, &self.config, &curr, None)?),
            None => None,
        };
        let out = GraphOutput {
            depth,
            depth_levels,
            semantic,
            flags,
        };
        Ok(self.collect_outputs(&g, &out))
    }

    fn collect_outputs(&self, g: &Graph, out: &GraphOutput) -> JointOutput {
        let m = self.config.num_levels;
        let mut levels: Vec<LevelOutput> = (0..m)
            .map(|_| LevelOutput {
                parallax: None,
                depth: None,
                semantic: None,
            })
            .collect();
        if let Some(frame) = &out.depth {
            for (lvl, dl) in levels.iter_mut().zip(&frame.levels) {
                let t = g.value(dl.parallax);
                let par = ParallaxMap {
                    width: t.width(),
                    height: t.height(),
                    values: t.data().to_vec(),
                };
                let depth = if frame.degenerate_baseline {
                    DepthMap::from_values(par.width, par.height, vec![0.0; par.values.len()])
                } else {
                    parallax_to_depth(&par, &dl.motion, &dl.intrinsics)
                        .expect("basis geometry was validated")
                };
                lvl.parallax = Some(par);
                lvl.depth = Some(depth);
            }
        }
        if let Some(sem) = &out.semantic {
            for (lvl, s) in levels.iter_mut().zip(sem) {
                lvl.semantic = Some(SemanticLevelState {
                    features: g.value(s.features).clone(),
                    probabilities: g.value(s.probs).clone(),
                });
            }
        }
        let finest = levels.last().expect("at least two levels");
        let depth = finest.depth.as_ref().map(upsample_depth);
        let probabilities = finest
            .semantic
            .as_ref()
            .map(|s| crate::autograd::upsample_nearest(&s.probabilities));
        let labels = probabilities.as_ref().map(argmax_labels);
        JointOutput {
            depth,
            probabilities,
            labels,
            levels,
            flags: out.flags,
        }
    }
}

fn depth_level_vars(g: &mut Graph, frame: &DepthFrameVars) -> Vec<DepthLevelVar> {
    frame
        .levels
        .iter()
        .map(|l| DepthLevelVar {
            depth: g.parallax_to_depth(l.parallax, l.basis.clone()),
            valid: Arc::new(l.basis.valid.clone()),
        })
        .collect()
}

/// Warps a previous-frame map into the current frame through `depth`, with
/// nearest sampling. Out-of-view pixels are zero.
pub fn warp_semantic_prior(
    previous: &Tensor,
    depth: &DepthMap,
    motion: &Se3,
    intr: &CameraIntrinsics,
) -> Result<Tensor> {
    let field = reproject(depth, motion, intr)?;
    let (warped, _) = warp_map(previous, &field, WarpMode::Nearest)?;
    Ok(warped)
}

/// Keeps every `factor`-th pixel, starting at the top-left corner.
pub fn downsample_tensor(t: &Tensor, factor: usize) -> Tensor {
    let (w, h) = (t.width() / factor, t.height() / factor);
    Tensor::from_fn(t.channels(), h, w, |c, y, x| t.at(c, y * factor, x * factor))
}

/// Replicates each depth value into a 2×2 block.
pub fn upsample_depth(d: &DepthMap) -> DepthMap {
    let (w, h) = (d.width * 2, d.height * 2);
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = (y / 2) * d.width + x / 2;
            values.push(d.values[i]);
            valid.push(d.valid[i]);
        }
    }
    DepthMap {
        width: w,
        height: h,
        values,
        valid,
    }
}

/// Replicates each label into a 2×2 block.
pub fn upsample_labels(l: &LabelMap) -> LabelMap {
    let (w, h) = (l.width * 2, l.height * 2);
    let labels = (0..w * h)
        .map(|i| l.labels[(i / w / 2) * l.width + (i % w) / 2])
        .collect();
    LabelMap::new(w, h, labels)
}

/// Per-pixel most probable class; ties go to the lowest id.
pub fn argmax_labels(probs: &Tensor) -> LabelMap {
    let n = probs.plane_len();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..probs.channels() {
                if probs.channel(c)[i] > probs.channel(best)[i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(probs.width(), probs.height(), labels)
}
