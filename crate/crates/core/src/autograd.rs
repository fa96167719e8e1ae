//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every parameter that contributed to it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::geometry::{BilinearTaps, DepthMap, LabelMap, ParallaxBasis, MIN_PARALLAX};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Smallest predicted depth (meters) fed to a logarithm.
pub const MIN_DEPTH: f64 = 1e-3;
pub const DINL_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    Softplus(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    UpsampleNearest(Var),
    UpsampleBilinear(Var),
    Dinl { x: Var, stats: Vec<(f64, f64)> },
    L2Normalize { x: Var, norms: Vec<f64> },
    LogSoftmax(Var),
    Exp(Var),
    ParallaxWarp { src: Var, parallax: Var, basis: Arc<ParallaxBasis> },
    CostVolume { a: Var, b: Var, radius: usize },
    ParallaxToDepth { parallax: Var, basis: Arc<ParallaxBasis> },
    LogL1 { pred: Var, target: Arc<DepthMap>, mask: Arc<Vec<bool>>, scale: f64 },
    Nll { logp: Var, labels: Arc<LabelMap>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> HashMap<ParamId, Tensor> {
        self.grads
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Lays out 3×3, pad-1 patches as a `(C·9) × (Ho·Wo)` matrix.
fn im2col(x: &Tensor, stride: usize) -> (Vec<f64>, usize, usize) {
    let [c, h, w] = x.shape();
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = ho * wo;
    let mut col = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Tensor {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = ho * wo;
    let mut x = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = x.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Corner-anchored ×2 linear interpolation taps along one axis: output `2i`
/// copies input `i`, output `2i + 1` averages inputs `i` and `i + 1`.
fn linear_up_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 || i + 1 >= n {
                [(i, 1.0), (i, 0.0)]
            } else {
                [(i, 0.5), (i + 1, 0.5)]
            }
        })
        .collect()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cost_volume_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

/// Plain (non-differentiable) cost volume: channel `o` holds the mean over
/// channels of `a(q) · b(q + offset_o)`, zero where the offset leaves the map.
pub fn cost_volume(a: &Tensor, b: &Tensor, radius: usize) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let [c, h, w] = a.shape();
    let offsets = cost_volume_offsets(radius);
    let mut out = Tensor::zeros(offsets.len(), h, w);
    let inv_c = 1.0 / c as f64;
    for (o, &(dy, dx)) in offsets.iter().enumerate() {
        let (y_lo, y_hi) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy).max(0) as usize);
        let (x_lo, x_hi) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx).max(0) as usize);
        for ci in 0..c {
            let pa = a.channel(ci);
            let pb = b.channel(ci);
            let dst = out.channel_mut(o);
            for y in y_lo..y_hi {
                let yb = (y as isize + dy) as usize;
                for x in x_lo..x_hi {
                    let xb = (x as isize + dx) as usize;
                    dst[y * w + x] += pa[y * w + x] * pb[yb * w + xb] * inv_c;
                }
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// 3×3 convolution with zero padding 1. `w` has shape `(out, in, 9)`,
    /// `b` has shape `(out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let [cin, _, _] = xv.shape();
        let [cout, win, nine] = wv.shape();
        assert_eq!((win, nine), (cin, 9), "conv weight does not match input channels");
        assert_eq!(bv.len(), cout);
        let (col, ho, wo) = im2col(xv, stride);
        let n = ho * wo;
        let mut out = vec![0.0; cout * n];
        gemm(cout, cin * 9, n, wv.data(), false, &col, false, &mut out, false);
        for (o, &bias) in bv.data().iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_vec(cout, ho, wo, out),
            Op::Conv2d { x, w, b, stride },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_channels(start, len);
        let rg = self.rg(x);
        self.push(v, Op::Slice { x, start }, rg)
    }

    /// Nearest ×2 upsampling: every value fills a 2×2 block.
    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let v = upsample_nearest(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::UpsampleNearest(x), rg)
    }

    /// Corner-anchored bilinear ×2 upsampling.
    pub fn upsample_bilinear(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, h, w] = xv.shape();
        let (ty, tx) = (linear_up_taps(h), linear_up_taps(w));
        let mut out = Tensor::zeros(c, 2 * h, 2 * w);
        for ci in 0..c {
            let src = xv.channel(ci);
            let dst = out.channel_mut(ci);
            for (oy, &[(y0, wy0), (y1, wy1)]) in ty.iter().enumerate() {
                for (ox, &[(x0, wx0), (x1, wx1)]) in tx.iter().enumerate() {
                    dst[oy * 2 * w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::UpsampleBilinear(x), rg)
    }

    /// Per-channel spatial standardization `(x − mean) / (std + ε)`.
    pub fn dinl(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.plane_len() as f64;
        let mut out = xv.clone();
        let mut stats = Vec::with_capacity(xv.channels());
        for c in 0..xv.channels() {
            let plane = out.channel_mut(c);
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            let s = std + DINL_EPS;
            plane.iter_mut().for_each(|v| *v = (*v - mean) / s);
            stats.push((mean, std));
        }
        let rg = self.rg(x);
        self.push(out, Op::Dinl { x, stats }, rg)
    }

    /// Per-pixel L2 normalization across channels.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, h, w] = xv.shape();
        let n = h * w;
        let mut norms = vec![0.0; n];
        for ci in 0..c {
            for (acc, v) in norms.iter_mut().zip(xv.channel(ci)) {
                *acc += v * v;
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = xv.clone();
        for ci in 0..c {
            for (v, nrm) in out.channel_mut(ci).iter_mut().zip(&norms) {
                *v /= nrm + L2_EPS;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Log-softmax across channels at each pixel.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, h, w] = xv.shape();
        let mut out = xv.clone();
        for i in 0..h * w {
            let data = out.data_mut();
            let m = (0..c).map(|ci| data[ci * h * w + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ci| (data[ci * h * w + i] - m).exp()).sum::<f64>().ln();
            for ci in 0..c {
                data[ci * h * w + i] -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    /// Bilinearly samples `src` (a map of the previous frame) at
    /// `base + parallax · direction` for every pixel of the current frame.
    /// Out-of-view samples are zero.
    pub fn parallax_warp(&mut self, src: Var, parallax: Var, basis: Arc<ParallaxBasis>) -> Var {
        let sv = self.value(src);
        let pv = self.value(parallax);
        let [c, h, w] = sv.shape();
        assert_eq!(pv.shape(), [1, h, w]);
        assert_eq!((basis.width, basis.height), (w, h));
        let mut out = Tensor::zeros(c, h, w);
        for i in 0..h * w {
            let Some(taps) = warp_taps(&basis, pv.data()[i], i) else {
                continue;
            };
            for ci in 0..c {
                let s = taps.sample(sv.channel(ci), w);
                out.channel_mut(ci)[i] = s;
            }
        }
        let rg = self.rg(src) || self.rg(parallax);
        self.push(out, Op::ParallaxWarp { src, parallax, basis }, rg)
    }

    /// Differentiable version of [`cost_volume`].
    pub fn cost_volume(&mut self, a: Var, b: Var, radius: usize) -> Var {
        let v = cost_volume(self.value(a), self.value(b), radius);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::CostVolume { a, b, radius }, rg)
    }

    /// Per-ray parallax → depth conversion. Parallax is floored at
    /// [`MIN_PARALLAX`], depth at [`MIN_DEPTH`]; pixels without a usable ray
    /// output zero; their validity is `basis.valid`.
    pub fn parallax_to_depth(&mut self, parallax: Var, basis: Arc<ParallaxBasis>) -> Var {
        let pv = self.value(parallax);
        let [_, h, w] = pv.shape();
        assert_eq!((basis.width, basis.height), (w, h));
        let data = (0..h * w)
            .map(|i| {
                if !basis.valid[i] {
                    return 0.0;
                }
                let p = pv.data()[i].max(MIN_PARALLAX);
                basis.depth_of_parallax(i, p).max(MIN_DEPTH)
            })
            .collect();
        let rg = self.rg(parallax);
        self.push(
            Tensor::from_vec(1, h, w, data),
            Op::ParallaxToDepth { parallax, basis },
            rg,
        )
    }

    /// Multi-level log-L1 term for one level: `scale · Σ |ln d − ln d̂|` over
    /// pixels where `mask` holds. Predictions are floored at [`MIN_DEPTH`].
    pub fn log_l1(
        &mut self,
        pred: Var,
        target: Arc<DepthMap>,
        mask: Arc<Vec<bool>>,
        scale: f64,
    ) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), [1, target.height, target.width]);
        let mut s = 0.0;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                s += (target.values[i].ln() - pv.data()[i].max(MIN_DEPTH).ln()).abs();
            }
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(scale * s),
            Op::LogL1 {
                pred,
                target,
                mask,
                scale,
            },
            rg,
        )
    }

    /// `scale · Σ −logp[label]` over non-ignored pixels.
    pub fn nll(&mut self, logp: Var, labels: Arc<LabelMap>, scale: f64) -> Var {
        let lv = self.value(logp);
        let [c, h, w] = lv.shape();
        assert_eq!((labels.width, labels.height), (w, h));
        let mut s = 0.0;
        for (i, &l) in labels.labels.iter().enumerate() {
            if (l as usize) < c {
                s -= lv.data()[l as usize * h * w + i];
            }
        }
        let rg = self.rg(logp);
        self.push(Tensor::scalar(scale * s), Op::Nll { logp, labels, scale }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.backward_with_seed(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass of the vector-Jacobian product `seed · d(out)/d(params)`.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(self.value(out).shape(), seed.shape());
        let loss = out;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed);
        let mut params = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    params.insert(*id, g);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [cin, h, wd] = xv.shape();
                    let [cout, ho, wo] = g.shape();
                    let n = ho * wo;
                    if self.rg(*b) {
                        let db: Vec<f64> =
                            (0..cout).map(|o| g.channel(o).iter().sum()).collect();
                        send(&mut grads, *b, Tensor::from_vec(cout, 1, 1, db));
                    }
                    let need_w = self.rg(*w);
                    let need_x = self.rg(*x);
                    if need_w {
                        let (col, _, _) = im2col(xv, *stride);
                        let mut dw = vec![0.0; cout * cin * 9];
                        gemm(cout, n, cin * 9, g.data(), false, &col, true, &mut dw, false);
                        send(&mut grads, *w, Tensor::from_vec(cout, cin, 9, dw));
                    }
                    if need_x {
                        let mut dcol = vec![0.0; cin * 9 * n];
                        gemm(cin * 9, cout, n, wv.data(), true, g.data(), false, &mut dcol, false);
                        send(&mut grads, *x, col2im(&dcol, cin, h, wd, *stride));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        *dv *= sigmoid(v);
                    }
                    send(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Scale(x, f) => {
                    send(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).channels();
                        if self.rg(p) {
                            send(&mut grads, p, g.slice_channels(start, c));
                        }
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.channels(), xv.height(), xv.width());
                    let n = xv.plane_len();
                    d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    send(&mut grads, *x, d);
                }
                Op::UpsampleNearest(x) => {
                    let [c, h, w] = self.value(*x).shape();
                    let mut d = Tensor::zeros(c, h, w);
                    for ci in 0..c {
                        let src = g.channel(ci);
                        let dst = d.channel_mut(ci);
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::UpsampleBilinear(x) => {
                    let [c, h, w] = self.value(*x).shape();
                    let (ty, tx) = (linear_up_taps(h), linear_up_taps(w));
                    let mut d = Tensor::zeros(c, h, w);
                    for ci in 0..c {
                        let src = g.channel(ci);
                        let dst = d.channel_mut(ci);
                        for (oy, &[(y0, wy0), (y1, wy1)]) in ty.iter().enumerate() {
                            for (ox, &[(x0, wx0), (x1, wx1)]) in tx.iter().enumerate() {
                                let gv = src[oy * 2 * w + ox];
                                dst[y0 * w + x0] += gv * wy0 * wx0;
                                dst[y0 * w + x1] += gv * wy0 * wx1;
                                dst[y1 * w + x0] += gv * wy1 * wx0;
                                dst[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::Dinl { x, stats } => {
                    let xv = self.value(*x);
                    let n = xv.plane_len() as f64;
                    let mut d = g;
                    for (c, &(mean, std)) in stats.iter().enumerate() {
                        let s = std + DINL_EPS;
                        let xs = xv.channel(c);
                        let gs = d.channel_mut(c);
                        let g_mean = gs.iter().sum::<f64>() / n;
                        let g_dot: f64 = gs.iter().zip(xs).map(|(g, x)| g * (x - mean)).sum();
                        let k = if std > 0.0 { g_dot / (s * s * n * std) } else { 0.0 };
                        for (gv, &xvv) in gs.iter_mut().zip(xs) {
                            *gv = (*gv - g_mean) / s - k * (xvv - mean);
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::L2Normalize { x, norms } => {
                    let xv = self.value(*x);
                    let [c, _, _] = xv.shape();
                    let n = norms.len();
                    let mut dots = vec![0.0; n];
                    for ci in 0..c {
                        for ((acc, gv), xx) in dots.iter_mut().zip(g.channel(ci)).zip(xv.channel(ci)) {
                            *acc += gv * xx;
                        }
                    }
                    let mut d = g;
                    for ci in 0..c {
                        let xs = xv.channel(ci);
                        let gs = d.channel_mut(ci);
                        for i in 0..n {
                            let s = norms[i] + L2_EPS;
                            let corr = if norms[i] > 0.0 {
                                dots[i] * xs[i] / (s * s * norms[i])
                            } else {
                                0.0
                            };
                            gs[i] = gs[i] / s - corr;
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let [c, h, w] = y.shape();
                    let n = h * w;
                    let mut d = g;
                    let data = d.data_mut();
                    for i in 0..n {
                        let gs: f64 = (0..c).map(|ci| data[ci * n + i]).sum();
                        for ci in 0..c {
                            data[ci * n + i] -= y.data()[ci * n + i].exp() * gs;
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y;
                    }
                    send(&mut grads, *x, d);
                }
                Op::ParallaxWarp { src, parallax, basis } => {
                    let sv = self.value(*src);
                    let pv = self.value(*parallax);
                    let [c, h, w] = sv.shape();
                    let need_src = self.rg(*src);
                    let need_p = self.rg(*parallax);
                    let mut dsrc = Tensor::zeros(c, h, w);
                    let mut dp = Tensor::zeros(1, h, w);
                    for i in 0..h * w {
                        let Some(taps) = warp_taps(basis, pv.data()[i], i) else {
                            continue;
                        };
                        let [dx, dy] = basis.direction[i];
                        let weights = taps.weights(w);
                        let mut acc = 0.0;
                        for ci in 0..c {
                            let gv = g.channel(ci)[i];
                            if gv == 0.0 {
                                continue;
                            }
                            if need_src {
                                let plane = dsrc.channel_mut(ci);
                                for &(j, wt) in &weights {
                                    plane[j] += gv * wt;
                                }
                            }
                            if need_p {
                                let (du, dv) = taps.gradient(sv.channel(ci), w);
                                acc += gv * (du * dx + dv * dy);
                            }
                        }
                        dp.data_mut()[i] = acc;
                    }
                    if need_src {
                        send(&mut grads, *src, dsrc);
                    }
                    if need_p {
                        send(&mut grads, *parallax, dp);
                    }
                }
                Op::CostVolume { a, b, radius } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let [c, h, w] = av.shape();
                    let inv_c = 1.0 / c as f64;
                    let mut da = Tensor::zeros(c, h, w);
                    let mut db = Tensor::zeros(c, h, w);
                    for (o, &(dy, dx)) in cost_volume_offsets(*radius).iter().enumerate() {
                        let go = g.channel(o);
                        let y_lo = 0.max(-dy) as usize;
                        let y_hi = (h as isize - dy).clamp(0, h as isize) as usize;
                        let x_lo = 0.max(-dx) as usize;
                        let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
                        for ci in 0..c {
                            let pa = av.channel(ci);
                            let pb = bv.channel(ci);
                            for y in y_lo..y_hi {
                                let yb = (y as isize + dy) as usize;
                                for x in x_lo..x_hi {
                                    let xb = (x as isize + dx) as usize;
                                    let gv = go[y * w + x] * inv_c;
                                    da.channel_mut(ci)[y * w + x] += gv * pb[yb * w + xb];
                                    db.channel_mut(ci)[yb * w + xb] += gv * pa[y * w + x];
                                }
                            }
                        }
                    }
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::ParallaxToDepth { parallax, basis } => {
                    let pv = self.value(*parallax);
                    let mut d = g;
                    for (i, dv) in d.data_mut().iter_mut().enumerate() {
                        let p = pv.data()[i];
                        let depth = node.value.data()[i];
                        if !basis.valid[i] || p < MIN_PARALLAX || depth <= MIN_DEPTH {
                            *dv = 0.0;
                        } else {
                            *dv *= basis.depth_of_parallax_slope(i, p);
                        }
                    }
                    send(&mut grads, *parallax, d);
                }
                Op::LogL1 {
                    pred,
                    target,
                    mask,
                    scale,
                } => {
                    let pv = self.value(*pred);
                    let gs = g.data()[0] * scale;
                    let mut d = Tensor::zeros(1, target.height, target.width);
                    for (i, &m) in mask.iter().enumerate() {
                        let p = pv.data()[i];
                        if !m || p <= MIN_DEPTH {
                            continue;
                        }
                        let diff = target.values[i].ln() - p.ln();
                        // d|ln d − ln p|/dp = −sign(diff)/p
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d.data_mut()[i] = -gs * sign / p;
                    }
                    send(&mut grads, *pred, d);
                }
                Op::Nll { logp, labels, scale } => {
                    let [c, h, w] = self.value(*logp).shape();
                    let gs = g.data()[0] * scale;
                    let mut d = Tensor::zeros(c, h, w);
                    for (i, &l) in labels.labels.iter().enumerate() {
                        if (l as usize) < c {
                            d.data_mut()[l as usize * h * w + i] = -gs;
                        }
                    }
                    send(&mut grads, *logp, d);
                }
            }
        }
        Gradients { grads: params }
    }
}

#[inline]
fn warp_taps(basis: &ParallaxBasis, parallax: f64, i: usize) -> Option<BilinearTaps> {
    let [bx, by] = basis.base[i];
    if !bx.is_finite() {
        return None;
    }
    let [dx, dy] = basis.direction[i];
    BilinearTaps::new(bx + parallax * dx, by + parallax * dy, basis.width, basis.height)
}

/// Nearest ×2 upsampling of a plain tensor.
pub fn upsample_nearest(x: &Tensor) -> Tensor {
    let [c, h, w] = x.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Se3};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(Σ probe ⊙ f(x))/dx for a single-input op.
    fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let id = store.add("x", x.clone());
        let eval = |store: &ParamStore| -> Tensor {
            let mut g = Graph::new();
            let v = g.param(store, id);
            let out = build(&mut g, v);
            g.value(out).clone()
        };
        let shape = eval(&store).shape();
        let probe = rand_tensor(&mut rng, shape[0], shape[1], shape[2]);
        let dot = |t: &Tensor| -> f64 { t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };

        let mut g = Graph::new();
        let v = g.param(&store, id);
        let out = build(&mut g, v);
        let analytic = g
            .backward_with_seed(out, probe.clone())
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.channels(), x.height(), x.width()));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let fd = (dot(&eval(&plus)) - dot(&eval(&minus))) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())),
                "element {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 3, 4, 6);
        check_unary(x.clone(), |g, v| g.dinl(v), 1e-6);
        check_unary(x.clone(), |g, v| g.l2_normalize(v), 1e-6);
        check_unary(x.clone(), |g, v| g.log_softmax(v), 1e-6);
        check_unary(x.clone(), |g, v| g.softplus(v), 1e-6);
        check_unary(x.clone(), |g, v| g.upsample_bilinear(v), 1e-6);
        check_unary(x.clone(), |g, v| g.upsample_nearest(v), 1e-6);
        check_unary(x.clone(), |g, v| g.exp(v), 1e-6);
        check_unary(x.clone(), |g, v| g.slice_channels(v, 1, 2), 1e-6);
        check_unary(x.clone(), |g, v| g.cost_volume(v, v, 1), 1e-6);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for stride in [1, 2] {
            let w = rand_tensor(&mut rng, 2, 3, 9);
            let b = rand_tensor(&mut rng, 2, 1, 1);
            let x = rand_tensor(&mut rng, 3, 6, 4);
            let (w2, b2) = (w.clone(), b.clone());
            check_unary(
                x.clone(),
                move |g, v| {
                    let wi = g.input(w2.clone());
                    let bi = g.input(b2.clone());
                    g.conv2d(v, wi, bi, stride)
                },
                1e-6,
            );
            let (x2, b3) = (x.clone(), b.clone());
            check_unary(
                w.clone(),
                move |g, v| {
                    let xi = g.input(x2.clone());
                    let bi = g.input(b3.clone());
                    g.conv2d(xi, v, bi, stride)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 2, 5, 6);
        let w = rand_tensor(&mut rng, 3, 2, 9);
        let b = rand_tensor(&mut rng, 3, 1, 1);
        for stride in [1, 2] {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, bv, stride);
            let out = g.value(y);
            for o in 0..3 {
                for oy in 0..out.height() {
                    for ox in 0..out.width() {
                        let mut s = b.data()[o];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                        s += w.at(o, ci, ky * 3 + kx) * x.at(ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert!((s - out.at(o, oy, ox)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn parallax_warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let intr = CameraIntrinsics::new(8.0, 8.0, 4.0, 3.0, 8, 6).unwrap();
        let motion = Se3::from_axis_angle(Vector3::new(0.01, -0.02, 0.01), Vector3::new(0.5, 0.1, 0.1));
        let basis = Arc::new(ParallaxBasis::new(&motion, &intr));
        let src = rand_tensor(&mut rng, 2, 6, 8);
        let par = Tensor::from_fn(1, 6, 8, |_, _, _| rng.gen_range(0.1..1.7));
        let (b1, s1) = (basis.clone(), src.clone());
        check_unary(
            par.clone(),
            move |g, v| {
                let s = g.input(s1.clone());
                g.parallax_warp(s, v, b1.clone())
            },
            1e-5,
        );
        let (b2, p2) = (basis.clone(), par.clone());
        check_unary(
            src,
            move |g, v| {
                let p = g.input(p2.clone());
                g.parallax_warp(v, p, b2.clone())
            },
            1e-6,
        );
        let b3 = basis.clone();
        check_unary(par, move |g, v| g.parallax_to_depth(v, b3.clone()), 1e-5);
    }

    #[test]
    fn dinl_standardizes_channels() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(1, 2, 2, vec![1.0, 3.0, 1.0, 3.0]));
        let y = g.dinl(x);
        let out = g.value(y).data().to_vec();
        for (v, e) in out.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - e).abs() < 1e-4);
        }
        let c = g.input(Tensor::filled(1, 3, 3, 4.2));
        let z = g.dinl(c);
        assert!(g.value(z).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(7, 2, 2, 0.3));
        let l = g.log_softmax(x);
        let p = g.exp(l);
        assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn cost_volume_autocorrelation_peaks_at_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, 4, 8, 8));
        let n = g.l2_normalize(x);
        let cv = g.cost_volume(n, n, 3);
        let v = g.value(cv);
        let center = 24;
        for i in 0..64 {
            let peak = v.channel(center)[i];
            for o in 0..49 {
                if o != center {
                    assert!(v.channel(o)[i] < peak);
                }
            }
        }
    }

    #[test]
    fn cost_volume_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&mut rng, 4, 8, 8);
        let b = rand_tensor(&mut rng, 4, 8, 8);
        let cv = cost_volume(&a, &b, 3);
        let mut max_dev: f64 = 0.0;
        let mut o = 0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                for y in 0..8i32 {
                    for x in 0..8i32 {
                        let (yy, xx) = (y + dy, x + dx);
                        let mut s = 0.0;
                        if (0..8).contains(&yy) && (0..8).contains(&xx) {
                            for c in 0..4 {
                                s += a.at(c, y as usize, x as usize) * b.at(c, yy as usize, xx as usize);
                            }
                            s /= 4.0;
                        }
                        max_dev = max_dev.max((s - cv.at(o, y as usize, x as usize)).abs());
                    }
                }
                o += 1;
            }
        }
        assert!(max_dev < 1e-5);
    }
}
