//! In-memory network representation and shape inference.
//!
//! Only sequential chains are supported: conv blocks (conv, optional BN,
//! activation) interleaved with 2x2 max pools, optionally closed by a global
//! average pool and a linear head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Inference-mode batch normalization. Stores the running variance; the
/// effective standard deviation is `sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn sigma(&self, c: usize) -> f32 {
        (self.var[c] + self.eps).sqrt()
    }

    /// Applies BN to a single value of channel `c`.
    #[inline]
    pub fn apply(&self, c: usize, z: f32) -> f32 {
        (z - self.mean[c]) / self.sigma(c) * self.gamma[c] + self.beta[c]
    }

    pub fn retain(&mut self, keep: &[usize]) {
        let pick = |v: &Vec<f32>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        self.gamma = pick(&self.gamma);
        self.beta = pick(&self.beta);
        self.mean = pick(&self.mean);
        self.var = pick(&self.var);
    }

    fn validate(&self, channels: usize, layer: usize) -> Result<()> {
        let lens = [
            self.gamma.len(),
            self.beta.len(),
            self.mean.len(),
            self.var.len(),
        ];
        if lens.iter().any(|&l| l != channels) {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer}: BN arrays {lens:?} do not match {channels} output channels"
            )));
        }
        let all = self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.mean)
            .chain(&self.var);
        if !self.eps.is_finite() || all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {layer} BN parameters")));
        }
        if self.eps < 0.0 {
            return Err(Error::InvalidNetwork(format!(
                "layer {layer}: BN eps must be nonnegative"
            )));
        }
        for c in 0..channels {
            if self.var[c] < 0.0 || self.sigma(c) <= 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "layer {layer}: BN channel {c} has non-positive sigma"
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel affine map seen by the next layer before activation:
/// `BN(conv(x) + bias) = scale * conv(x) + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelAffine {
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// OIHW, square kernel.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub pad: usize,
    pub bn: Option<BatchNormParams>,
    pub activation: Activation,
    /// Storage bit-width of the weights; 32 means full precision.
    pub wbits: u32,
}

impl ConvBlock {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return None;
        }
        Some((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    /// Folded conv-bias + BN affine of output channel `c`.
    pub fn channel_affine(&self, c: usize) -> ChannelAffine {
        let bias = self.bias.as_ref().map_or(0.0, |b| b[c] as f64);
        match &self.bn {
            Some(bn) => {
                let scale = bn.gamma[c] as f64 / bn.sigma(c) as f64;
                ChannelAffine {
                    scale,
                    shift: bn.beta[c] as f64 - scale * (bn.mean[c] as f64 - bias),
                }
            }
            None => ChannelAffine { scale: 1.0, shift: bias },
        }
    }

    /// Drops output channels not listed in `keep` (weights, bias, BN).
    pub fn retain_outputs(&mut self, keep: &[usize]) {
        self.weight = self.weight.select_rows(keep);
        if let Some(b) = &mut self.bias {
            *b = keep.iter().map(|&i| b[i]).collect();
        }
        if let Some(bn) = &mut self.bn {
            bn.retain(keep);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out_features x in_features`, row-major.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub wbits: u32,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvBlock),
    /// 2x2 window, stride 2.
    MaxPool,
    GlobalAvgPool,
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool => "maxpool",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear(_) => "linear",
        }
    }
}

/// Feature shape of a single sample (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(self) -> usize {
        match self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            FeatureShape::Map { c, h, w } => vec![c, h, w],
            FeatureShape::Flat(n) => vec![n],
        }
    }
}

/// Where the next layer of a conv block draws its input channels from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Successor {
    /// Layer index of the next conv block.
    Conv(usize),
    /// Layer index of a linear head fed through global average pooling.
    Head(usize),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

impl Network {
    /// Layer indices of the conv blocks, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    pub fn block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv(_)))
            .count()
    }

    /// The `b`-th conv block.
    pub fn block(&self, b: usize) -> Option<&ConvBlock> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .nth(b)
    }

    pub fn conv_at(&self, layer: usize) -> Option<&ConvBlock> {
        match self.layers.get(layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_at_mut(&mut self, layer: usize) -> Option<&mut ConvBlock> {
        match self.layers.get_mut(layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn head(&self) -> Option<&Linear> {
        match self.layers.last() {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    /// The layer consuming the output channels of the conv at `layer`.
    pub fn successor(&self, layer: usize) -> Successor {
        let mut saw_gap = false;
        for (i, l) in self.layers.iter().enumerate().skip(layer + 1) {
            match l {
                Layer::Conv(_) => return Successor::Conv(i),
                Layer::MaxPool => {}
                Layer::GlobalAvgPool => saw_gap = true,
                Layer::Linear(_) if saw_gap => return Successor::Head(i),
                Layer::Linear(_) => return Successor::None,
            }
        }
        Successor::None
    }

    /// Per-layer output shapes for one sample, checking that the chain is consistent.
    pub fn infer_shapes(&self) -> Result<Vec<FeatureShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut cur = FeatureShape::Map { c, h, w };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (Layer::Conv(conv), FeatureShape::Map { c, h, w }) => {
                    if conv.in_channels() != c {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: conv expects {} input channels, got {c}",
                            conv.in_channels()
                        )));
                    }
                    let (oh, ow) = conv.output_hw(h, w).ok_or_else(|| {
                        Error::ShapeMismatch(format!(
                            "layer {idx}: kernel {} does not fit {h}x{w} input",
                            conv.kernel()
                        ))
                    })?;
                    FeatureShape::Map {
                        c: conv.out_channels(),
                        h: oh,
                        w: ow,
                    }
                }
                (Layer::MaxPool, FeatureShape::Map { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: max pool needs at least 2x2, got {h}x{w}"
                        )));
                    }
                    FeatureShape::Map {
                        c,
                        h: h / 2,
                        w: w / 2,
                    }
                }
                (Layer::GlobalAvgPool, FeatureShape::Map { c, .. }) => {
                    FeatureShape::Map { c, h: 1, w: 1 }
                }
                (Layer::Linear(lin), FeatureShape::Map { c, h: 1, w: 1 }) => {
                    if lin.in_features() != c {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: linear expects {} features, got {c}",
                            lin.in_features()
                        )));
                    }
                    FeatureShape::Flat(lin.out_features())
                }
                (l, s) => {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {idx}: {} cannot consume {s:?}",
                        l.kind()
                    )))
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Full structural and numerical validation.
    pub fn validate(&self) -> Result<()> {
        if self.block_count() == 0 {
            return Err(Error::InvalidNetwork("network has no conv blocks".into()));
        }
        let n = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    let s = conv.weight.shape();
                    if s.len() != 4 || s[2] != s[3] {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: conv weight must be OIHW with square kernel, got {s:?}"
                        )));
                    }
                    if conv.stride == 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {idx}: stride must be at least 1"
                        )));
                    }
                    check_wbits(idx, conv.wbits)?;
                    if !conv.weight.is_finite() {
                        return Err(Error::NonFinite(format!("layer {idx} conv weights")));
                    }
                    if let Some(b) = &conv.bias {
                        if b.len() != s[0] {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {idx}: bias length {} != {} channels",
                                b.len(),
                                s[0]
                            )));
                        }
                        if b.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!("layer {idx} conv bias")));
                        }
                    }
                    if let Some(bn) = &conv.bn {
                        bn.validate(s[0], idx)?;
                    }
                }
                Layer::MaxPool => {}
                Layer::GlobalAvgPool => {
                    let next = self.layers.get(idx + 1);
                    if !matches!(next, None | Some(Layer::Linear(_))) {
                        return Err(Error::Unsupported(format!(
                            "layer {idx}: global average pool must be last or feed the head"
                        )));
                    }
                }
                Layer::Linear(lin) => {
                    if idx != n - 1 || idx == 0 {
                        return Err(Error::Unsupported(format!(
                            "layer {idx}: linear layer is only supported as the final head"
                        )));
                    }
                    if !matches!(self.layers[idx - 1], Layer::GlobalAvgPool) {
                        return Err(Error::Unsupported(format!(
                            "layer {idx}: linear head must follow a global average pool"
                        )));
                    }
                    if lin.weight.shape().len() != 2 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: linear weight must be 2-D"
                        )));
                    }
                    check_wbits(idx, lin.wbits)?;
                    if !lin.weight.is_finite() {
                        return Err(Error::NonFinite(format!("layer {idx} linear weights")));
                    }
                    if let Some(b) = &lin.bias {
                        if b.len() != lin.out_features() {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {idx}: bias length {} != {} outputs",
                                b.len(),
                                lin.out_features()
                            )));
                        }
                        if b.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!("layer {idx} linear bias")));
                        }
                    }
                }
            }
        }
        self.infer_shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(*self.infer_shapes()?.last().expect("validated networks are non-empty"))
    }
}

fn check_wbits(idx: usize, wbits: u32) -> Result<()> {
    if !(2..=32).contains(&wbits) {
        return Err(Error::InvalidNetwork(format!(
            "layer {idx}: wbits {wbits} outside 2..=32"
        )));
    }
    Ok(())
}
