use rand::Rng;

use super::config::ArchitectureConfig;
use super::layers::Refiner;
use super::ModelError;
use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Semantic features `f_S` and probability map `S` of one decoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLevelState {
    pub features: Tensor,
    pub probabilities: Tensor,
}

/// Graph handles of one semantic decoder level.
#[derive(Debug, Clone, Copy)]
pub struct SemanticLevelVars {
    pub features: Var,
    pub log_probs: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct SemanticDecoder {
    /// Indexed by encoder level, finest first.
    pub refiners: Vec<Refiner>,
}

impl SemanticDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ArchitectureConfig) -> Self {
        let refiners = (1..=cfg.num_levels)
            .map(|l| {
                Refiner::new(
                    store,
                    rng,
                    &format!("semantic.level{l}.refiner"),
                    cfg.semantic_refiner_inputs(l),
                    cfg.refiner_width,
                    cfg.refiner_depth,
                    cfg.semantic_head_channels(),
                )
            })
            .collect();
        Self { refiners }
    }

    pub fn num_params(&self) -> usize {
        self.refiners.iter().map(Refiner::num_params).sum()
    }

    /// Runs every level from coarsest to finest. `pyramid` is finest first;
    /// `priors`, when given, holds the warped previous semantic map per level,
    /// coarsest first. The result is coarsest first.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ArchitectureConfig,
        pyramid: &[Var],
        priors: Option<&[Var]>,
    ) -> Result<Vec<SemanticLevelVars>, ModelError> {
        let mut out: Vec<SemanticLevelVars> = Vec::with_capacity(cfg.num_levels);
        for (k, l) in (1..=cfg.num_levels).rev().enumerate() {
            let prev = out.last().map(|s| (s.features, s.probs));
            let mut input = preprocess_var(g, cfg, prev, pyramid[l - 1])?;
            if cfg.use_semantic_time_warp {
                let prior = priors
                    .and_then(|p| p.get(k))
                    .ok_or_else(|| ModelError::Config("semantic time warp needs a prior".into()))?;
                input = g.concat(&[input, *prior]);
            }
            out.push(refine_var(g, store, cfg, &self.refiners[l - 1], input));
        }
        Ok(out)
    }
}

/// Graph form of [`semantic_preprocess`]; `prev` is `(f_S, S)` of the coarser level.
pub fn preprocess_var(
    g: &mut Graph,
    cfg: &ArchitectureConfig,
    prev: Option<(Var, Var)>,
    f_enc: Var,
) -> Result<Var, ModelError> {
    let [_, h, w] = g.value(f_enc).shape();
    let feats = if cfg.use_feature_normalization {
        g.l2_normalize(f_enc)
    } else {
        f_enc
    };
    let feats = if cfg.semantic_sncv {
        g.cost_volume(feats, feats, cfg.sncv_radius)
    } else {
        feats
    };
    let (fs, s) = match prev {
        Some((fs, s)) => {
            let [_, ph, pw] = g.value(s).shape();
            if (2 * pw, 2 * ph) != (w, h) || g.value(fs).shape()[1..] != [ph, pw] {
                return Err(ModelError::Shape(format!(
                    "previous semantic state is {pw}x{ph}, level is {w}x{h}"
                )));
            }
            (g.upsample_bilinear(fs), g.upsample_nearest(s))
        }
        None => (
            g.input(Tensor::zeros(cfg.semantic_feature_channels, h, w)),
            g.input(Tensor::zeros(cfg.num_classes, h, w)),
        ),
    };
    Ok(g.concat(&[feats, fs, s]))
}

fn refine_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    refiner: &Refiner,
    input: Var,
) -> SemanticLevelVars {
    let head = refiner.forward(g, store, input);
    let nf = cfg.semantic_feature_channels;
    let features = g.slice_channels(head, 0, nf);
    let logits = g.slice_channels(head, nf, cfg.num_classes);
    let log_probs = g.log_softmax(logits);
    let probs = g.exp(log_probs);
    SemanticLevelVars {
        features,
        log_probs,
        probs,
    }
}

/// Refiner input for one level: normalized encoder features, ×2 upscaled
/// `f_S` (bilinear) and `S` (nearest). Zeros stand in for the missing state
/// at the coarsest level.
pub fn semantic_preprocess(
    prev: Option<&SemanticLevelState>,
    f_enc: &Tensor,
    cfg: &ArchitectureConfig,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let f = g.input(f_enc.clone());
    let prev = prev.map(|s| (g.input(s.features.clone()), g.input(s.probabilities.clone())));
    let out = preprocess_var(&mut g, cfg, prev, f)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchitectureConfig {
        ArchitectureConfig {
            num_levels: 2,
            encoder_channels: vec![3, 5],
            num_classes: 3,
            refiner_depth: 1,
            refiner_width: 4,
            ..ArchitectureConfig::default()
        }
    }

    #[test]
    fn coarsest_level_pads_with_zeros() {
        let cfg = ArchitectureConfig::default();
        let f = Tensor::from_fn(128, 12, 12, |c, y, x| (c + y * 3 + x) as f64 * 0.01 + 0.1);
        let out = semantic_preprocess(None, &f, &cfg).unwrap();
        assert_eq!(out.shape(), [128 + 4 + 7, 12, 12]);
        assert!(out.data()[128 * 144..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upscaled_probabilities_still_sum_to_one() {
        let cfg = tiny();
        let probs = Tensor::from_fn(3, 2, 2, |c, y, x| [0.2, 0.3, 0.5][(c + y + x) % 3]);
        let prev = SemanticLevelState {
            features: Tensor::filled(4, 2, 2, 0.5),
            probabilities: probs,
        };
        let f = Tensor::filled(5, 4, 4, 1.0);
        let out = semantic_preprocess(Some(&prev), &f, &cfg).unwrap();
        assert_eq!(out.channels(), 5 + 4 + 3);
        for i in 0..16 {
            let s: f64 = (9..12).map(|c| out.channel(c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let cfg = tiny();
        let prev = SemanticLevelState {
            features: Tensor::zeros(4, 3, 3),
            probabilities: Tensor::filled(3, 3, 3, 1.0 / 3.0),
        };
        let f = Tensor::filled(5, 4, 4, 1.0);
        assert!(matches!(
            semantic_preprocess(Some(&prev), &f, &cfg),
            Err(ModelError::Shape(_))
        ));
    }
}
