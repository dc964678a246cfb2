//! Evaluation: feature-map MSE against a reference network, top-1 accuracy,
//! and the two reconstruction-free baselines used for comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward, Tap};
use crate::io::Dataset;
use crate::model::{Layer, Network};
use crate::prune::PruneDecision;
use crate::quant::{quantize_layer, Granularity};
use crate::reconstruct::{apply_prune_reconstruction_many, build_pruning_system, Compensation, NextLayer};
use crate::tensor::Tensor;

/// `n` samples of i.i.d. N(0, 1) inputs, NCHW.
pub fn gaussian_inputs(shape: [usize; 3], n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect::<Vec<f32>>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("positive dims")
}

fn capture(net: &Network, tap: Tap, inputs: &Tensor) -> Result<Tensor> {
    let mut out = forward(net, inputs, &[tap])?;
    Ok(out.captures.remove(&tap).expect("requested tap"))
}

/// Mean squared difference of `tap` per sample.
pub fn per_sample_mse(a: &Network, b: &Network, tap: Tap, inputs: &Tensor) -> Result<Vec<f64>> {
    let (x, y) = (capture(a, tap, inputs)?, capture(b, tap, inputs)?);
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{tap:?}: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.shape()[0];
    let per = x.row_len();
    Ok((0..n)
        .map(|s| {
            x.row(s)
                .iter()
                .zip(y.row(s))
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                / per as f64
        })
        .collect())
}

/// Mean squared difference of `tap` over all samples and elements.
pub fn feature_mse(a: &Network, b: &Network, tap: Tap, inputs: &Tensor) -> Result<f64> {
    let per = per_sample_mse(a, b, tap, inputs)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn apply_decisions<F>(net: &Network, decisions: &[PruneDecision], mut compensate: F) -> Result<Network>
where
    F: FnMut(&crate::model::ConvBlock, usize, &[usize]) -> Result<Option<Vec<f64>>>,
{
    let mut out = net.clone();
    for d in decisions.iter().filter(|d| !d.pruned.is_empty()) {
        let li = d.layer_index;
        let next = match out.successor(li) {
            crate::model::Successor::Conv(i) | crate::model::Successor::Head(i) => i,
            crate::model::Successor::None => {
                return Err(Error::InvalidArgument(format!(
                    "layer {li} has no successor to prune into"
                )))
            }
        };
        let conv = out.conv_at(li).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {li} is not a conv block"))
        })?;
        let mut scales = Vec::new();
        for &j in &d.pruned {
            if let Some(s) = compensate(conv, j, &d.kept)? {
                scales.push((j, s));
            }
        }
        let comps: Vec<Compensation<'_>> = scales
            .iter()
            .map(|(j, s)| Compensation { pruned: *j, s_hat: s })
            .collect();
        let (lo, hi) = out.layers.split_at_mut(next);
        let Layer::Conv(conv) = &mut lo[li] else { unreachable!() };
        let next = match &mut hi[0] {
            Layer::Conv(c) => NextLayer::Conv(c),
            Layer::Linear(l) => NextLayer::Head(l),
            _ => unreachable!(),
        };
        apply_prune_reconstruction_many(conv, next, &d.kept, &comps)?;
    }
    Ok(out)
}

/// Removes the pruned channels with no compensation.
pub fn baseline_prune_only(net: &Network, decisions: &[PruneDecision]) -> Result<Network> {
    apply_decisions(net, decisions, |_, _, _| Ok(None))
}

/// Replaces each pruned channel by the single kept channel most aligned
/// with it (largest |cosine| of the scaled weight vectors), with the
/// least-squares coefficient.
pub fn baseline_one_to_one(net: &Network, decisions: &[PruneDecision]) -> Result<Network> {
    apply_decisions(net, decisions, |conv, j, kept| {
        let pack = match build_pruning_system(conv, j, kept) {
            Ok(p) => p,
            Err(Error::DeadChannel { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let vv: f64 = pack.v.iter().map(|v| v * v).sum();
        let mut best: Option<(usize, f64, f64)> = None;
        for c in 0..pack.columns() {
            let g = pack.column(c);
            let gg: f64 = g.iter().map(|v| v * v).sum();
            if gg == 0.0 {
                continue;
            }
            let gv: f64 = g.iter().zip(&pack.v).map(|(a, b)| a * b).sum();
            let cos = gv.abs() / (gg * vv).sqrt().max(f64::MIN_POSITIVE);
            if best.is_none_or(|(_, b, _)| cos > b) {
                best = Some((c, cos, gv / gg));
            }
        }
        Ok(best.map(|(c, _, coef)| {
            let mut s = vec![0.0; kept.len()];
            s[c] = coef;
            s
        }))
    })
}

/// Quantizes every conv and linear layer to `wbits` with no compensation.
/// `wbits` of 32 returns the network unchanged.
pub fn quantize_uncompensated(net: &Network, wbits: u32, granularity: Granularity) -> Result<Network> {
    let mut out = net.clone();
    if wbits >= 32 {
        return Ok(out);
    }
    for layer in &mut out.layers {
        let (weight, bits) = match layer {
            Layer::Conv(c) => (&mut c.weight, &mut c.wbits),
            Layer::Linear(l) => (&mut l.weight, &mut l.wbits),
            _ => continue,
        };
        *weight = quantize_layer(weight, wbits, granularity)?.dequant;
        *bits = wbits;
    }
    Ok(out)
}

/// Fraction of samples whose arg-max output equals the label.
pub fn top1_accuracy(net: &Network, data: &Dataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let out = forward(net, &data.images, &[])?.output;
    let width = out.row_len();
    if data.class_count > width {
        return Err(Error::ShapeMismatch(format!(
            "{} classes but the network has {width} outputs",
            data.class_count
        )));
    }
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|(s, &label)| {
            let row = out.row(*s);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            arg == label as usize
        })
        .count();
    Ok(Some(correct as f64 / data.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMse {
    pub block: usize,
    /// `None` when the maps of the two networks differ in shape.
    pub pre_bn: Option<f64>,
    pub post_act: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: Option<f64>,
    pub baseline_top1: Option<f64>,
    pub feature_mse: Vec<LayerMse>,
    pub trials: usize,
    pub seed: u64,
}

/// Evaluates `net`, optionally against a reference network on `trials`
/// Gaussian inputs and on a labelled dataset.
pub fn evaluate(
    net: &Network,
    reference: Option<&Network>,
    data: Option<&Dataset>,
    trials: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut feature_mse = Vec::new();
    if let Some(base) = reference.filter(|_| trials > 0) {
        if base.input_shape != net.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input shapes {:?} and {:?} differ",
                net.input_shape, base.input_shape
            )));
        }
        let inputs = gaussian_inputs(net.input_shape, trials, seed);
        let blocks = net.block_count().min(base.block_count());
        let taps: Vec<Tap> = (0..blocks)
            .flat_map(|b| [Tap::PreBn(b), Tap::PostAct(b)])
            .collect();
        let a = forward(net, &inputs, &taps)?.captures;
        let b = forward(base, &inputs, &taps)?.captures;
        let mse = |tap: Tap| {
            let (x, y) = (&a[&tap], &b[&tap]);
            (x.shape() == y.shape()).then(|| {
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                    .sum::<f64>()
                    / x.len() as f64
            })
        };
        feature_mse = (0..blocks)
            .map(|b| LayerMse {
                block: b,
                pre_bn: mse(Tap::PreBn(b)),
                post_act: mse(Tap::PostAct(b)),
            })
            .collect();
    }
    let (top1, baseline_top1) = match data {
        Some(d) => (
            top1_accuracy(net, d)?,
            reference.map(|r| top1_accuracy(r, d)).transpose()?.flatten(),
        ),
        None => (None, None),
    };
    Ok(EvalResult {
        top1,
        baseline_top1,
        feature_mse,
        trials,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::random_network;

    #[test]
    fn gaussian_inputs_are_seeded() {
        let a = gaussian_inputs([2, 3, 3], 4, 1);
        assert_eq!(a, gaussian_inputs([2, 3, 3], 4, 1));
        assert_ne!(a, gaussian_inputs([2, 3, 3], 4, 2));
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.5);
    }

    #[test]
    fn mse_zero_against_itself_and_shape_mismatch() {
        let net = random_network("c8-c4-gap-fc3", [2, 6, 6], 0).unwrap();
        let x = gaussian_inputs([2, 6, 6], 3, 0);
        assert_eq!(feature_mse(&net, &net, Tap::PreBn(1), &x).unwrap(), 0.0);
        let d = PruneDecision {
            layer_index: 0,
            pruned: vec![1, 5],
            kept: vec![0, 2, 3, 4, 6, 7],
            criterion: Default::default(),
            ratio: 0.25,
        };
        let pruned = baseline_prune_only(&net, std::slice::from_ref(&d)).unwrap();
        assert!(matches!(
            feature_mse(&net, &pruned, Tap::PreBn(0), &x),
            Err(Error::ShapeMismatch(_))
        ));
        let e = evaluate(&pruned, Some(&net), None, 3, 0).unwrap();
        assert_eq!(e.feature_mse[0].pre_bn, None);
        assert!(e.feature_mse[1].pre_bn.unwrap() > 0.0);
        let one = baseline_one_to_one(&net, &[d]).unwrap();
        assert_eq!(one.block(0).unwrap().out_channels(), 6);
    }
}
