use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network shape and variant switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    /// Number of encoder/decoder levels `M`.
    pub num_levels: usize,
    /// Output channels of each encoder level, finest first.
    pub encoder_channels: Vec<usize>,
    pub num_classes: usize,
    /// Channels of the semantic feature map passed between decoder levels.
    pub semantic_feature_channels: usize,
    /// Hidden 3×3 convolutions per refiner, before the output convolution.
    pub refiner_depth: usize,
    pub refiner_width: usize,
    /// Per-channel standardization after the first encoder convolution.
    pub use_dinl: bool,
    /// Per-pixel L2 normalization of encoder features in the decoders.
    pub use_feature_normalization: bool,
    /// Cost volume between current and warped previous features in the depth decoder.
    pub use_sncv: bool,
    /// Replace the semantic decoder's normalized features by their spatial autocorrelation.
    pub semantic_sncv: bool,
    /// Feed the previous frame's semantic map, warped with ground-truth depth,
    /// into every semantic decoder level.
    pub use_semantic_time_warp: bool,
    pub sncv_radius: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            num_levels: 5,
            encoder_channels: vec![16, 32, 64, 96, 128],
            num_classes: 7,
            semantic_feature_channels: 4,
            refiner_depth: 5,
            refiner_width: 64,
            use_dinl: true,
            use_feature_normalization: true,
            use_sncv: true,
            semantic_sncv: false,
            use_semantic_time_warp: false,
            sncv_radius: 3,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_levels < 2 {
            return bad(format!("num_levels must be at least 2, got {}", self.num_levels));
        }
        if self.encoder_channels.len() != self.num_levels {
            return bad(format!(
                "encoder_channels has {} entries for {} levels",
                self.encoder_channels.len(),
                self.num_levels
            ));
        }
        if self.encoder_channels[0] == 0
            || self.encoder_channels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("encoder_channels must be positive and strictly increasing".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.semantic_feature_channels == 0 || self.refiner_width == 0 {
            return bad("semantic_feature_channels and refiner_width must be positive".into());
        }
        if self.refiner_depth == 0 {
            return bad("refiner_depth must be at least 1".into());
        }
        Ok(())
    }

    /// Checks that the input resolution halves cleanly `M` times.
    pub fn validate_input(&self, width: usize, height: usize) -> Result<(), ModelError> {
        let div = 1usize << self.num_levels;
        if width == 0 || height == 0 || !width.is_multiple_of(div) || !height.is_multiple_of(div) {
            return Err(ModelError::Config(format!(
                "input {width}x{height} is not divisible by 2^{} = {div}",
                self.num_levels
            )));
        }
        Ok(())
    }

    /// `(width, height)` of encoder level `level` (1-based, finest = 1).
    pub fn level_size(&self, width: usize, height: usize, level: usize) -> (usize, usize) {
        (width >> level, height >> level)
    }

    pub fn sncv_channels(&self) -> usize {
        (2 * self.sncv_radius + 1).pow(2)
    }

    /// Channels entering the semantic refiner of encoder level `level` (1-based).
    pub fn semantic_refiner_inputs(&self, level: usize) -> usize {
        let features = if self.semantic_sncv {
            self.sncv_channels()
        } else {
            self.encoder_channels[level - 1]
        };
        let prior = if self.use_semantic_time_warp { self.num_classes } else { 0 };
        features + self.semantic_feature_channels + self.num_classes + prior
    }

    /// Channels entering the parallax refiner of encoder level `level` (1-based).
    pub fn depth_refiner_inputs(&self, level: usize) -> usize {
        let c = self.encoder_channels[level - 1];
        let cv = if self.use_sncv { self.sncv_channels() } else { 0 };
        // current features, warped previous features, cost volume,
        // upscaled coarser parallax, warped previous-frame parallax
        2 * c + cv + 2
    }

    /// Output channels of the semantic refiner: features then class logits.
    pub fn semantic_head_channels(&self) -> usize {
        self.semantic_feature_channels + self.num_classes
    }

    /// Config text embedded in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let cfg = ArchitectureConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ArchitectureConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ArchitectureConfig::default();
        cfg.encoder_channels = vec![16, 16, 64, 96, 128];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.num_levels = 4;
        assert!(cfg.validate().is_err());
        assert!(ArchitectureConfig::from_toml("bogus_key = 3").is_err());
    }

    #[test]
    fn input_divisibility() {
        let cfg = ArchitectureConfig::default();
        cfg.validate_input(384, 384).unwrap();
        assert!(cfg.validate_input(384, 380).is_err());
    }

    #[test]
    fn refiner_input_arithmetic() {
        let cfg = ArchitectureConfig::default();
        assert_eq!(cfg.semantic_refiner_inputs(5), 128 + 4 + 7);
        let warp = ArchitectureConfig {
            use_semantic_time_warp: true,
            ..ArchitectureConfig::default()
        };
        assert_eq!(warp.semantic_refiner_inputs(3), cfg.semantic_refiner_inputs(3) + 7);
        assert_eq!(cfg.semantic_head_channels(), 11);
    }
}
