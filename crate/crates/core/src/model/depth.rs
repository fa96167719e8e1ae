use std::sync::Arc;

use rand::Rng;

use super::config::ArchitectureConfig;
use super::layers::Refiner;
use crate::autograd::{Graph, Var};
use crate::geometry::{CameraIntrinsics, ParallaxBasis, Se3, MIN_BASELINE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One parallax refiner per level, unshared.
#[derive(Debug, Clone)]
pub struct DepthDecoder {
    /// Indexed by encoder level, finest first.
    pub refiners: Vec<Refiner>,
}

/// Parallax of one level together with the geometry used to interpret it.
#[derive(Debug, Clone)]
pub struct DepthLevelVars {
    pub parallax: Var,
    pub basis: Arc<ParallaxBasis>,
    pub intrinsics: CameraIntrinsics,
    pub motion: Se3,
}

/// Output of the depth decoder for one frame, coarsest level first.
#[derive(Debug, Clone)]
pub struct DepthFrameVars {
    pub levels: Vec<DepthLevelVars>,
    /// The baseline was too small to refine; parallax is a passthrough.
    pub degenerate_baseline: bool,
}

impl DepthFrameVars {
    /// Parallax of every level, finest first, as fed to the next frame.
    pub fn parallax_finest_first(&self) -> Vec<Var> {
        self.levels.iter().rev().map(|l| l.parallax).collect()
    }
}

impl DepthDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ArchitectureConfig) -> Self {
        let refiners = (1..=cfg.num_levels)
            .map(|l| {
                Refiner::new(
                    store,
                    rng,
                    &format!("depth.level{l}.refiner"),
                    cfg.depth_refiner_inputs(l),
                    cfg.refiner_width,
                    cfg.refiner_depth,
                    1,
                )
            })
            .collect();
        Self { refiners }
    }

    pub fn num_params(&self) -> usize {
        self.refiners.iter().map(Refiner::num_params).sum()
    }

    /// Decodes parallax for the current frame.
    ///
    /// `curr` and `prev` are the feature pyramids (finest first) of the current
    /// and previous frame, `prev_parallax` the previous frame's parallax
    /// (finest first) if any, `motion` maps current-frame points into the
    /// previous camera, and `intr` describes the full-resolution input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ArchitectureConfig,
        curr: &[Var],
        prev: &[Var],
        prev_parallax: Option<&[Var]>,
        motion: &Se3,
        intr: &CameraIntrinsics,
    ) -> DepthFrameVars {
        let degenerate = motion.translation_norm() < MIN_BASELINE;
        let mut levels: Vec<DepthLevelVars> = Vec::with_capacity(cfg.num_levels);
        let mut coarser: Option<Var> = None;
        for l in (1..=cfg.num_levels).rev() {
            let [_, h, w] = g.value(curr[l - 1]).shape();
            let level_intr = intr.scaled_to(w, h);
            let basis = Arc::new(ParallaxBasis::new(motion, &level_intr));
            let up = match coarser {
                Some(p) => {
                    let u = g.upsample_nearest(p);
                    g.scale(u, 2.0)
                }
                None => g.input(Tensor::zeros(1, h, w)),
            };
            let parallax = if degenerate {
                up
            } else {
                let prev_par = prev_parallax.map(|pp| pp[l - 1]);
                self.decode_level(
                    g,
                    store,
                    cfg,
                    &self.refiners[l - 1],
                    curr[l - 1],
                    prev[l - 1],
                    up,
                    prev_par,
                    &basis,
                )
            };
            levels.push(DepthLevelVars {
                parallax,
                basis,
                intrinsics: level_intr,
                motion: *motion,
            });
            coarser = Some(parallax);
        }
        DepthFrameVars {
            levels,
            degenerate_baseline: degenerate,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ArchitectureConfig,
        refiner: &Refiner,
        f_curr: Var,
        f_prev: Var,
        up: Var,
        prev_parallax: Option<Var>,
        basis: &Arc<ParallaxBasis>,
    ) -> Var {
        let [_, h, w] = g.value(f_curr).shape();
        let warped = g.parallax_warp(f_prev, up, basis.clone());
        let prev_par = match prev_parallax {
            Some(p) => g.parallax_warp(p, up, basis.clone()),
            None => g.input(Tensor::zeros(1, h, w)),
        };
        let (fc, fw) = if cfg.use_feature_normalization {
            (g.l2_normalize(f_curr), g.l2_normalize(warped))
        } else {
            (f_curr, warped)
        };
        let mut parts = vec![fc, fw];
        if cfg.use_sncv {
            parts.push(g.cost_volume(fc, fw, cfg.sncv_radius));
        }
        parts.push(up);
        parts.push(prev_par);
        let input = g.concat(&parts);
        let residual = refiner.forward(g, store, input);
        let pre = g.add(up, residual);
        g.softplus(pre)
    }
}
