use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// 3×3 convolution with bias and zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * 9;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, fan_in, out_channels, in_channels, 9),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(out_channels, 1, 1));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * 9 + self.out_channels
    }
}

/// `depth` ReLU convolutions of width `width` followed by a linear output convolution.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub hidden: Vec<Conv>,
    pub output: Conv,
}

impl Refiner {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        width: usize,
        depth: usize,
        out_channels: usize,
    ) -> Self {
        let mut hidden = Vec::with_capacity(depth);
        let mut c = in_channels;
        for i in 0..depth {
            hidden.push(Conv::new(store, rng, &format!("{name}.conv{i}"), c, width, 1));
            c = width;
        }
        let output = Conv::new(store, rng, &format!("{name}.out"), c, out_channels, 1);
        Self { hidden, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for conv in &self.hidden {
            let y = conv.forward(g, store, h);
            h = g.relu(y);
        }
        self.output.forward(g, store, h)
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).in_channels
    }

    pub fn num_params(&self) -> usize {
        self.hidden.iter().map(Conv::num_params).sum::<usize>() + self.output.num_params()
    }
}
