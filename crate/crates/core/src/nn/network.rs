//! The fixed three-layer super-resolution network and its hand-derived backward pass.
//!
//! ```text
//! F1 = relu(W1 * x + B1)     n1 filters of c x f1 x f1
//! F2 = relu(W2 * F1 + B2)    n2 filters of n1 x f2 x f2
//! F  = W3 * F2 + B3          1 filter of n2 x f3 x f3
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{col2im, conv2d_valid, gemm, im2col, ConvLayer};
use super::{NnError, Result, Tensor3};
use crate::grid::NormStats;

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
}

impl Default for Architecture {
    /// 64 9x9 filters, 32 1x1 filters, one 5x5 reconstruction filter over
    /// precipitation + elevation.
    fn default() -> Self {
        Self { channels: 2, n1: 64, n2: 32, f1: 9, f2: 1, f3: 5 }
    }
}

impl Architecture {
    /// Total spatial shrinkage of the three valid convolutions.
    pub fn shrink(&self) -> usize {
        self.f1 + self.f2 + self.f3 - 3
    }

    /// Border lost on each side; equals the replication padding used at inference.
    pub fn margin(&self) -> usize {
        self.shrink() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.n1, self.n2, self.f1, self.f2, self.f3];
        if dims.iter().any(|&d| d == 0 || d > 4096) {
            return Err(NnError::Architecture(format!("dimension out of range in {self:?}")));
        }
        if [self.f1, self.f2, self.f3].iter().any(|f| f % 2 == 0) {
            return Err(NnError::Architecture(format!("kernel sizes must be odd in {self:?}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.n1 * (self.channels * self.f1 * self.f1 + 1)
            + self.n2 * (self.n1 * self.f2 * self.f2 + 1)
            + (self.n2 * self.f3 * self.f3 + 1)
    }
}

/// Weights, biases and input normalization of one network.
///
/// Labels and outputs live in the normalized space of input channel 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SrcnnParams {
    pub arch: Architecture,
    pub layers: [ConvLayer; 3],
    pub norm: NormStats,
}

impl SrcnnParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            layers: [
                ConvLayer::zeros(arch.n1, arch.channels, arch.f1),
                ConvLayer::zeros(arch.n2, arch.n1, arch.f2),
                ConvLayer::zeros(1, arch.n2, arch.f3),
            ],
            norm: NormStats::new(vec![0.0; arch.channels], vec![1.0; arch.channels]),
        }
    }

    /// FNV-1a over every parameter bit pattern; detects stale forward caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn check_shapes(&self) -> Result<()> {
        let a = self.arch;
        let expect = [(a.n1, a.channels, a.f1), (a.n2, a.n1, a.f2), (1, a.n2, a.f3)];
        for (i, (layer, (o, c, k))) in self.layers.iter().zip(expect).enumerate() {
            if layer.out_channels != o
                || layer.in_channels != c
                || layer.kernel != k
                || layer.weights.len() != o * c * k * k
                || layer.bias.len() != o
            {
                return Err(NnError::Architecture(format!("layer {} does not match {a:?}", i + 1)));
            }
        }
        if self.norm.channels() != a.channels {
            return Err(NnError::Architecture("normalization channel count".into()));
        }
        Ok(())
    }
}

/// Gaussian(0, 1e-3) weights and zero biases, fully determined by `seed`.
pub fn init_params(seed: u64, arch: Architecture) -> SrcnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut p = SrcnnParams::zeros(arch);
    for layer in p.layers.iter_mut() {
        layer.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    }
    p
}

/// Activations saved by [`forward_cached`] for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    input_shape: (usize, usize, usize),
    cols: [Vec<f64>; 3],
    act1: Tensor3,
    act2: Tensor3,
    pub output: Tensor3,
}

fn unfold(t: &Tensor3, k: usize) -> Vec<f64> {
    if k == 1 {
        t.data.clone()
    } else {
        im2col(t, k)
    }
}

fn layer_forward(layer: &ConvLayer, cols: &[f64], oh: usize, ow: usize, relu: bool) -> Tensor3 {
    let n = oh * ow;
    let mut out = Tensor3::zeros(layer.out_channels, oh, ow);
    for (o, b) in layer.bias.iter().enumerate() {
        out.data[o * n..(o + 1) * n].fill(*b);
    }
    gemm(layer.out_channels, layer.fan_in(), n, &layer.weights, false, cols, false, 1.0, &mut out.data);
    if relu {
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

fn check_input(p: &SrcnnParams, x: &Tensor3) -> Result<()> {
    if x.channels != p.arch.channels {
        return Err(NnError::Shape(format!(
            "network expects {} channels, got {}",
            p.arch.channels, x.channels
        )));
    }
    let min = p.arch.shrink() + 1;
    if x.height < min || x.width < min {
        return Err(NnError::Shape(format!(
            "{}x{} input is below the {min}x{min} minimum",
            x.height, x.width
        )));
    }
    Ok(())
}

pub fn forward_cached(p: &SrcnnParams, x: &Tensor3) -> Result<ForwardCache> {
    check_input(p, x)?;
    let [l1, l2, l3] = &p.layers;
    let cols1 = unfold(x, l1.kernel);
    let (h1, w1) = (x.height - l1.kernel + 1, x.width - l1.kernel + 1);
    let act1 = layer_forward(l1, &cols1, h1, w1, true);
    let cols2 = unfold(&act1, l2.kernel);
    let (h2, w2) = (h1 - l2.kernel + 1, w1 - l2.kernel + 1);
    let act2 = layer_forward(l2, &cols2, h2, w2, true);
    let cols3 = unfold(&act2, l3.kernel);
    let output = layer_forward(l3, &cols3, h2 - l3.kernel + 1, w2 - l3.kernel + 1, false);
    Ok(ForwardCache {
        fingerprint: p.fingerprint(),
        input_shape: x.shape(),
        cols: [cols1, cols2, cols3],
        act1,
        act2,
        output,
    })
}

/// Network output `[1, H - shrink, W - shrink]`, without keeping activations.
pub fn forward(p: &SrcnnParams, x: &Tensor3) -> Result<Tensor3> {
    check_input(p, x)?;
    let relu = |mut t: Tensor3| {
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        t
    };
    let [l1, l2, l3] = &p.layers;
    let a1 = relu(conv2d_valid(x, l1)?);
    let a2 = relu(conv2d_valid(&a1, l2)?);
    conv2d_valid(&a2, l3)
}

/// Gradient of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }

    fn add(&mut self, other: &LayerGrad) {
        self.weights.iter_mut().zip(&other.weights).for_each(|(a, b)| *a += b);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: [LayerGrad; 3],
    pub input: Option<Tensor3>,
}

impl Gradients {
    pub fn zeros_like(p: &SrcnnParams) -> Self {
        Self { layers: p.layers.each_ref().map(LayerGrad::zeros_like), input: None }
    }

    /// Accumulate parameter gradients (input gradients are not summed).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add(b);
        }
    }
}

/// Returns (dW, db, d_cols) for one layer given the pre-activation gradient.
fn layer_backward(layer: &ConvLayer, cols: &[f64], dz: &[f64], n: usize, want_cols: bool) -> (LayerGrad, Option<Vec<f64>>) {
    let fan = layer.fan_in();
    let mut dw = vec![0.0; layer.weights.len()];
    gemm(layer.out_channels, n, fan, dz, false, cols, true, 0.0, &mut dw);
    let db = dz.chunks_exact(n).map(|c| c.iter().sum()).collect();
    let dcols = want_cols.then(|| {
        let mut d = vec![0.0; fan * n];
        gemm(fan, layer.out_channels, n, &layer.weights, true, dz, false, 0.0, &mut d);
        d
    });
    (LayerGrad { weights: dw, bias: db }, dcols)
}

fn fold(dcols: Vec<f64>, like: (usize, usize, usize), k: usize) -> Tensor3 {
    let (c, h, w) = like;
    if k == 1 {
        Tensor3 { channels: c, height: h, width: w, data: dcols }
    } else {
        col2im(&dcols, c, h, w, k)
    }
}

fn relu_mask(grad: &mut Tensor3, act: &Tensor3) {
    grad.data.iter_mut().zip(&act.data).for_each(|(g, a)| {
        if *a <= 0.0 {
            *g = 0.0
        }
    });
}

/// Analytic gradients of all parameters (and optionally the input) for the
/// upstream gradient `d_out` on the cached output.
pub fn backward(p: &SrcnnParams, cache: &ForwardCache, d_out: &Tensor3, want_input: bool) -> Result<Gradients> {
    if cache.fingerprint != p.fingerprint() {
        return Err(NnError::StaleCache);
    }
    if d_out.shape() != cache.output.shape() {
        return Err(NnError::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            d_out.shape(),
            cache.output.shape()
        )));
    }
    let [l1, l2, l3] = &p.layers;
    let (g3, dcols3) = layer_backward(l3, &cache.cols[2], &d_out.data, d_out.plane_len(), true);
    let mut d2 = fold(dcols3.unwrap(), cache.act2.shape(), l3.kernel);
    relu_mask(&mut d2, &cache.act2);

    let (g2, dcols2) = layer_backward(l2, &cache.cols[1], &d2.data, d2.plane_len(), true);
    let mut d1 = fold(dcols2.unwrap(), cache.act1.shape(), l2.kernel);
    relu_mask(&mut d1, &cache.act1);

    let (g1, dcols1) = layer_backward(l1, &cache.cols[0], &d1.data, d1.plane_len(), want_input);
    let input = dcols1.map(|d| fold(d, cache.input_shape, l1.kernel));
    Ok(Gradients { layers: [g1, g2, g3], input })
}

/// Mean squared error and its gradient `2 (pred - label) / N`.
pub fn mse_loss(pred: &Tensor3, label: &Tensor3) -> Result<(f64, Tensor3)> {
    if pred.shape() != label.shape() {
        return Err(NnError::Shape(format!(
            "prediction {:?} vs label {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    let n = pred.data.len() as f64;
    let mut grad = pred.clone();
    let mut sum = 0.0;
    for (g, l) in grad.data.iter_mut().zip(&label.data) {
        let d = *g - l;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}
