//! Symmetric uniform weight quantization.
//!
//! A channel with max magnitude `s` is mapped onto `2^k` evenly spaced levels
//! covering `[-s, s]`:
//!
//! ```text
//! code    = round((2^k - 1) * (w / (2 s) + 1/2))      (half away from zero)
//! dequant = (2 code / (2^k - 1) - 1) * s
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    PerChannel,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    pub codes: Vec<u8>,
    pub bits: u32,
    /// Dequantization scale (max |w| over the channel, or the tensor).
    pub scale: f32,
    pub dequant: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub channels: Vec<QuantizedChannel>,
    /// Dequantized weights, same shape as the input.
    pub dequant: Tensor,
}

impl QuantizedLayer {
    pub fn codes(&self) -> Vec<u8> {
        self.channels
            .iter()
            .flat_map(|c| c.codes.iter().copied())
            .collect()
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Quantizes `weights` against an explicit `scale`.
pub fn quantize_with_scale(weights: &[f32], bits: u32, scale: f32) -> Result<QuantizedChannel> {
    check_bits(bits)?;
    if weights.iter().any(|v| !v.is_finite()) || !scale.is_finite() {
        return Err(Error::NonFinite("weights to quantize".into()));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let s = scale as f64;
    let codes: Vec<u8> = weights
        .iter()
        .map(|&w| {
            let x = if s > 0.0 { w as f64 / (2.0 * s) } else { 0.0 };
            (levels * (x + 0.5)).round().clamp(0.0, levels) as u8
        })
        .collect();
    let dequant = codes
        .iter()
        .map(|&c| ((2.0 * c as f64 / levels - 1.0) * s) as f32)
        .collect();
    Ok(QuantizedChannel {
        codes,
        bits,
        scale,
        dequant,
    })
}

pub fn quantize_channel(weights: &[f32], bits: u32) -> Result<QuantizedChannel> {
    quantize_with_scale(weights, bits, max_abs(weights))
}

/// Quantizes each output channel of a weight tensor (OIHW or a 2-D matrix).
pub fn quantize_layer(
    weights: &Tensor,
    bits: u32,
    granularity: Granularity,
) -> Result<QuantizedLayer> {
    let tensor_scale = max_abs(weights.data());
    let channels = (0..weights.shape()[0])
        .map(|o| {
            let row = weights.row(o);
            match granularity {
                Granularity::PerChannel => quantize_channel(row, bits),
                Granularity::PerTensor => quantize_with_scale(row, bits, tensor_scale),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let data = channels
        .iter()
        .flat_map(|c| c.dequant.iter().copied())
        .collect();
    Ok(QuantizedLayer {
        dequant: Tensor::new(weights.shape().to_vec(), data)?,
        channels,
    })
}
