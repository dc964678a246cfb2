//! Model size and compute accounting.
//!
//! FLOPs are counted as multiply-accumulates (MACs), without the factor 2.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{FeatureShape, Layer, Network};

pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// Bytes needed to store `weights` values at `wbits` plus `full_precision`
/// values at 32 bits.
pub fn size_bytes_for_counts(weights: u64, full_precision: u64, wbits: u32) -> f64 {
    weights as f64 * wbits as f64 / 8.0 + full_precision as f64 * 4.0
}

/// Storage size of one weighted layer; `None` for parameter-free layers.
pub fn layer_size_bytes(layer: &Layer, wbits: u32) -> Option<f64> {
    match layer {
        Layer::Conv(c) => {
            let extra = c.bias.as_ref().map_or(0, Vec::len)
                + c.bn.as_ref().map_or(0, |bn| 4 * bn.channels());
            Some(size_bytes_for_counts(
                c.weight.len() as u64,
                extra as u64,
                wbits,
            ))
        }
        Layer::Linear(l) => Some(size_bytes_for_counts(
            l.weight.len() as u64,
            l.bias.as_ref().map_or(0, Vec::len) as u64,
            wbits,
        )),
        _ => None,
    }
}

/// Total bytes with `wbits(layer_index)` per weighted layer. BN statistics and
/// biases always count at 32 bits.
pub fn model_size_bytes(net: &Network, wbits: impl Fn(usize) -> u32) -> f64 {
    net.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| layer_size_bytes(l, wbits(i)))
        .sum()
}

/// Size using the bit-widths recorded on each layer.
pub fn stored_size_bytes(net: &Network) -> f64 {
    model_size_bytes(net, |i| match &net.layers[i] {
        Layer::Conv(c) => c.wbits,
        Layer::Linear(l) => l.wbits,
        _ => 32,
    })
}

/// Per-layer MACs (zero for pooling layers).
pub fn layer_flops(net: &Network) -> Result<Vec<u64>> {
    let shapes = net.infer_shapes()?;
    Ok(net
        .layers
        .iter()
        .zip(&shapes)
        .map(|(layer, shape)| match (layer, shape) {
            (Layer::Conv(c), FeatureShape::Map { h, w, .. }) => {
                let k = c.kernel() as u64;
                c.out_channels() as u64 * c.in_channels() as u64 * k * k * (*h * *w) as u64
            }
            (Layer::Linear(l), _) => l.out_features() as u64 * l.in_features() as u64,
            _ => 0,
        })
        .collect())
}

pub fn flops(net: &Network) -> Result<u64> {
    Ok(layer_flops(net)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub size_bytes: f64,
    pub size_mb: f64,
    pub macs: u64,
}

impl Accounting {
    pub fn of(net: &Network) -> Result<Self> {
        let size_bytes = stored_size_bytes(net);
        Ok(Self {
            size_bytes,
            size_mb: size_bytes / BYTES_PER_MB,
            macs: flops(net)?,
        })
    }
}
