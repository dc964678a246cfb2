//! Reference inference engine: direct convolution, inference-mode BN, ReLU,
//! 2x2 max pooling, global average pooling and a linear head.
//!
//! Samples of a batch are independent and evaluated in parallel; each sample
//! is computed sequentially, so results do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ConvBlock, FeatureShape, Layer, Linear, Network};
use crate::tensor::Tensor;

/// A capture point inside conv block `b` (blocks counted from 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    /// Convolution output before BN (`Z`).
    PreBn(usize),
    /// Block output after BN and activation (`X`).
    PostAct(usize),
}

impl Tap {
    pub fn block(self) -> usize {
        match self {
            Tap::PreBn(b) | Tap::PostAct(b) => b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Output of the last layer, batch-major.
    pub output: Tensor,
    pub captures: BTreeMap<Tap, Tensor>,
}

/// Direct zero-padded convolution of one CHW sample.
pub fn conv2d(conv: &ConvBlock, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = conv
        .output_hw(h, w)
        .expect("shapes are validated before convolution");
    let (o_ch, i_ch, k) = (conv.out_channels(), conv.in_channels(), conv.kernel());
    let (stride, pad) = (conv.stride as isize, conv.pad as isize);
    let weights = conv.weight.data();
    let mut out = vec![0.0f32; o_ch * oh * ow];
    for o in 0..o_ch {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = &conv.bias {
            plane.fill(b[o]);
        }
        for i in 0..i_ch {
            let src = &input[i * h * w..(i + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = weights[((o * i_ch + i) * k + kh) * k + kw];
                    for y in 0..oh {
                        let iy = y as isize * stride + kh as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let ix = x as isize * stride + kw as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Applies BN (if any) then the activation, channel by channel.
pub fn bn_activate(conv: &ConvBlock, z: &[f32], plane: usize) -> Vec<f32> {
    let mut x = z.to_vec();
    for (c, chunk) in x.chunks_mut(plane).enumerate() {
        for v in chunk {
            let b = match &conv.bn {
                Some(bn) => bn.apply(c, *v),
                None => *v,
            };
            *v = conv.activation.apply(b);
        }
    }
    x
}

fn max_pool(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let at = |dy: usize, dx: usize| src[(2 * y + dy) * w + 2 * x + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn global_avg_pool(input: &[f32], c: usize, plane: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| input[ch * plane..(ch + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect()
}

fn linear(lin: &Linear, input: &[f32]) -> Vec<f32> {
    let n_in = lin.in_features();
    (0..lin.out_features())
        .map(|o| {
            let row = &lin.weight.data()[o * n_in..(o + 1) * n_in];
            let dot: f32 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            dot + lin.bias.as_ref().map_or(0.0, |b| b[o])
        })
        .collect()
}

struct SampleResult {
    output: Vec<f32>,
    captures: Vec<Vec<f32>>,
}

fn forward_sample(
    net: &Network,
    sample: &[f32],
    taps: &[Tap],
    shapes: &[FeatureShape],
) -> Result<SampleResult> {
    let mut captures = vec![Vec::new(); taps.len()];
    let [mut c, mut h, mut w] = net.input_shape;
    let mut cur = sample.to_vec();
    let mut block = 0usize;
    for (idx, layer) in net.layers.iter().enumerate() {
        cur = match layer {
            Layer::Conv(conv) => {
                let (z, oh, ow) = conv2d(conv, &cur, h, w);
                let x = bn_activate(conv, &z, oh * ow);
                for (slot, tap) in captures.iter_mut().zip(taps) {
                    match *tap {
                        Tap::PreBn(b) if b == block => slot.clone_from(&z),
                        Tap::PostAct(b) if b == block => slot.clone_from(&x),
                        _ => {}
                    }
                }
                block += 1;
                (c, h, w) = (conv.out_channels(), oh, ow);
                x
            }
            Layer::MaxPool => {
                let out = max_pool(&cur, c, h, w);
                (h, w) = (h / 2, w / 2);
                out
            }
            Layer::GlobalAvgPool => {
                let out = global_avg_pool(&cur, c, h * w);
                (h, w) = (1, 1);
                out
            }
            Layer::Linear(lin) => linear(lin, &cur),
        };
        debug_assert_eq!(cur.len(), shapes[idx].numel());
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: idx });
        }
    }
    Ok(SampleResult {
        output: cur,
        captures,
    })
}

/// Runs `input` (NCHW, N >= 1) through `net`, capturing the requested taps.
pub fn forward(net: &Network, input: &Tensor, taps: &[Tap]) -> Result<ForwardOutput> {
    let shapes = net.infer_shapes()?;
    let s = input.shape();
    if s.len() != 4 || s[1..] != net.input_shape[..] {
        return Err(Error::ShapeMismatch(format!(
            "input {s:?} does not match [N, {:?}]",
            net.input_shape
        )));
    }
    let conv_shapes: Vec<FeatureShape> = net
        .layers
        .iter()
        .zip(&shapes)
        .filter_map(|(l, s)| matches!(l, Layer::Conv(_)).then_some(*s))
        .collect();
    for tap in taps {
        if tap.block() >= conv_shapes.len() {
            return Err(Error::IndexOutOfRange {
                what: "conv blocks",
                index: tap.block(),
                len: conv_shapes.len(),
            });
        }
    }

    let batch = s[0];
    let per = input.row_len();
    let results: Vec<SampleResult> = (0..batch)
        .into_par_iter()
        .map(|n| forward_sample(net, &input.data()[n * per..(n + 1) * per], taps, &shapes))
        .collect::<Result<_>>()?;

    let out_shape = *shapes.last().expect("validated networks are non-empty");
    let mut out_dims = vec![batch];
    out_dims.extend(out_shape.dims());
    let output = Tensor::new(
        out_dims,
        results.iter().flat_map(|r| r.output.iter().copied()).collect(),
    )?;

    let mut captures = BTreeMap::new();
    for (t, tap) in taps.iter().enumerate() {
        let mut dims = vec![batch];
        dims.extend(conv_shapes[tap.block()].dims());
        let data = results
            .iter()
            .flat_map(|r| r.captures[t].iter().copied())
            .collect();
        captures.insert(*tap, Tensor::new(dims, data)?);
    }
    Ok(ForwardOutput { output, captures })
}
