use crate::error::{Error, Result};
use crate::model::{ConvBlock, Linear};
use crate::tensor::Tensor;

/// The layer that consumes the compressed layer's output channels.
#[derive(Debug)]
pub enum NextLayer<'a> {
    Conv(&'a mut ConvBlock),
    /// Linear head behind global average pooling: one weight column per channel.
    Head(&'a mut Linear),
}

impl NextLayer<'_> {
    fn weight_mut(&mut self) -> &mut Tensor {
        match self {
            NextLayer::Conv(c) => &mut c.weight,
            NextLayer::Head(l) => &mut l.weight,
        }
    }

    fn input_channels(&self) -> usize {
        match self {
            NextLayer::Conv(c) => c.in_channels(),
            NextLayer::Head(l) => l.in_features(),
        }
    }
}

fn check_pair(layer: &ConvBlock, next: &NextLayer<'_>, channels: &[usize]) -> Result<()> {
    let n = layer.out_channels();
    if next.input_channels() != n {
        return Err(Error::ShapeMismatch(format!(
            "next layer takes {} input channels, layer produces {n}",
            next.input_channels()
        )));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= n) {
        return Err(Error::IndexOutOfRange {
            what: "output channels",
            index: bad,
            len: n,
        });
    }
    Ok(())
}

/// `W[:, i] += s_i * W[:, j]` for every kept `i` (slices along the input axis).
pub fn fold_pruned_channel(weight: &mut Tensor, pruned: usize, kept: &[usize], s_hat: &[f64]) {
    let width = weight.shape()[1];
    let inner: usize = weight.shape()[2..].iter().product();
    let data = weight.data_mut();
    for o in 0..data.len() / (width * inner) {
        let base = o * width * inner;
        let src: Vec<f64> = data[base + pruned * inner..base + (pruned + 1) * inner]
            .iter()
            .map(|&v| v as f64)
            .collect();
        for (&i, &s) in kept.iter().zip(s_hat) {
            let dst = &mut data[base + i * inner..base + (i + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&src) {
                *d = (*d as f64 + s * v) as f32;
            }
        }
    }
}

/// One pruned channel and the scales applied to the kept channels.
#[derive(Debug, Clone, Copy)]
pub struct Compensation<'a> {
    pub pruned: usize,
    pub s_hat: &'a [f64],
}

/// Folds every compensation into `next`, then removes all channels outside
/// `kept` from `layer` (outputs, bias, BN) and from `next` (inputs).
///
/// Folds read the pruned slices of `next` before any deletion, so the order
/// of `compensations` does not matter.
pub fn apply_prune_reconstruction_many(
    layer: &mut ConvBlock,
    mut next: NextLayer<'_>,
    kept: &[usize],
    compensations: &[Compensation<'_>],
) -> Result<()> {
    let mut touched: Vec<usize> = kept.to_vec();
    touched.extend(compensations.iter().map(|c| c.pruned));
    check_pair(layer, &next, &touched)?;
    for c in compensations {
        if c.s_hat.len() != kept.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for {} kept channels",
                c.s_hat.len(),
                kept.len()
            )));
        }
        if kept.contains(&c.pruned) {
            return Err(Error::InvalidArgument(format!(
                "channel {} is both pruned and kept",
                c.pruned
            )));
        }
    }
    let weight = next.weight_mut();
    for c in compensations {
        fold_pruned_channel(weight, c.pruned, kept, c.s_hat);
    }
    *weight = weight.select_axis1(kept);
    layer.retain_outputs(kept);
    Ok(())
}

/// Removes output channel `pruned` of `layer` and folds it into `next` as
/// `W_{k,i} += s_i W_{k,j}` over `kept`.
pub fn apply_prune_reconstruction(
    layer: &mut ConvBlock,
    next: NextLayer<'_>,
    pruned: usize,
    kept: &[usize],
    s_hat: &[f64],
) -> Result<()> {
    let survivors: Vec<usize> = (0..layer.out_channels()).filter(|&c| c != pruned).collect();
    check_pair(layer, &next, &[pruned])?;
    if let Some(&bad) = kept.iter().find(|&&i| i == pruned || i >= layer.out_channels()) {
        return Err(Error::InvalidArgument(format!(
            "kept channel {bad} is the pruned channel or out of range"
        )));
    }
    let mut next = next;
    if s_hat.len() != kept.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {} kept channels",
            s_hat.len(),
            kept.len()
        )));
    }
    let weight = next.weight_mut();
    fold_pruned_channel(weight, pruned, kept, s_hat);
    *weight = weight.select_axis1(&survivors);
    layer.retain_outputs(&survivors);
    Ok(())
}

/// Replaces channel `m` of `layer` by its quantized weights and scales the
/// matching input slice of `next` by `s_tilde`. BN is left unchanged.
pub fn apply_quant_reconstruction(
    layer: &mut ConvBlock,
    mut next: NextLayer<'_>,
    m: usize,
    s_tilde: f64,
    w_tilde: &[f32],
) -> Result<()> {
    check_pair(layer, &next, &[m])?;
    if w_tilde.len() != layer.weight.row_len() {
        return Err(Error::ShapeMismatch(format!(
            "quantized channel has {} values, expected {}",
            w_tilde.len(),
            layer.weight.row_len()
        )));
    }
    layer.weight.row_mut(m).copy_from_slice(w_tilde);
    scale_input_slice(next.weight_mut(), m, s_tilde);
    Ok(())
}

pub(crate) fn scale_input_slice(weight: &mut Tensor, channel: usize, s: f64) {
    let width = weight.shape()[1];
    let inner: usize = weight.shape()[2..].iter().product();
    let data = weight.data_mut();
    for o in 0..data.len() / (width * inner) {
        let base = (o * width + channel) * inner;
        for v in &mut data[base..base + inner] {
            *v = (*v as f64 * s) as f32;
        }
    }
}
