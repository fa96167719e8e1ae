use rand::Rng;

use super::config::ArchitectureConfig;
use super::layers::Conv;
use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Two convolutions per level; the first one halves the resolution.
#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub levels: Vec<EncoderLevel>,
    use_dinl: bool,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ArchitectureConfig) -> Self {
        let mut in_c = 3;
        let levels = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("encoder.level{}", i + 1);
                let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), in_c, c, 2);
                let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), c, c, 1);
                in_c = c;
                EncoderLevel { conv1, conv2 }
            })
            .collect();
        Self {
            levels,
            use_dinl: cfg.use_dinl,
        }
    }

    /// Feature maps of every level, finest (level 1, half resolution) first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Vec<Var> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let mut h = level.conv1.forward(g, store, x);
            if i == 0 && self.use_dinl {
                h = g.dinl(h);
            }
            h = g.relu(h);
            let h2 = level.conv2.forward(g, store, h);
            x = g.relu(h2);
            out.push(x);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.conv1.num_params() + l.conv2.num_params())
            .sum()
    }
}

/// Per-channel spatial standardization of a plain feature map.
pub fn dinl_normalize(features: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let y = g.dinl(x);
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dinl_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(3, 5, 7, |c, _, _| rng.gen_range(-4.0..4.0) * (c + 1) as f64 + c as f64);
        let y = dinl_normalize(&x);
        for c in 0..3 {
            let p = y.channel(c);
            let n = p.len() as f64;
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dinl_constant_channel_maps_to_zero() {
        let y = dinl_normalize(&Tensor::filled(2, 3, 3, 0.7));
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }
}
