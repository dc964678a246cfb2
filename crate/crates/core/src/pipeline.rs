//! Whole-network compression: select, solve, reconstruct, quantize.
//!
//! Conv blocks are visited in order. For each block that has a successor:
//!
//! 1. the lowest-norm channels are selected for pruning;
//! 2. each pruned channel gets scales over the kept channels, computed from the
//!    block's full-precision weights, and is folded into the successor;
//! 3. the surviving channels are quantized and each gets a scalar scale that is
//!    folded into the successor's matching input slice.
//!
//! The successor is then compressed with its already-modified weights. The
//! last conv block is never pruned; its quantization scales go into the linear
//! head when one exists. The head is quantized without compensation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{self, Accounting};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, SymMatrix};
use crate::model::{ConvBlock, Layer, Network, Successor};
use crate::prune::{channel_norm, select_pruned, Criterion, PruneDecision};
use crate::quant::{quantize_layer, Granularity};
use crate::reconstruct::{
    apply_prune_reconstruction_many, build_pruning_system, build_quant_terms, pruning_loss,
    quant_loss, scale_input_slice, solve_quant_scale, Compensation, LossBreakdown, NextLayer,
    DEFAULT_RIDGE_FACTOR,
};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA1: f64 = 0.01;
pub const DEFAULT_ALPHA2: f64 = 0.008;
pub const FULL_PRECISION: u32 = 32;
const RIDGE_RETRIES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Fraction of output channels pruned in every prunable block, in `[0, 1)`.
    pub prune_ratio: f64,
    /// Per-block overrides of `prune_ratio`, keyed by conv block index.
    #[serde(default)]
    pub layer_ratios: BTreeMap<usize, f64>,
    pub criterion: Criterion,
    /// 2..=8, or 32 for no quantization.
    pub wbits: u32,
    #[serde(default)]
    pub granularity: Granularity,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Conv block indices left unpruned.
    #[serde(default)]
    pub skip_layers: BTreeSet<usize>,
    /// Absolute ridge; `None` uses `1e-8 * trace(QᵀQ) / |kept|` per system.
    pub ridge: Option<f64>,
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            prune_ratio: 0.0,
            layer_ratios: BTreeMap::new(),
            criterion: Criterion::L2,
            wbits: FULL_PRECISION,
            granularity: Granularity::PerChannel,
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            skip_layers: BTreeSet::new(),
            ridge: None,
            seed: 0,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
        if !ratio_ok(self.prune_ratio) || !self.layer_ratios.values().all(|&r| ratio_ok(r)) {
            return Err(Error::InvalidArgument(
                "prune ratios must lie in [0, 1)".into(),
            ));
        }
        if !((2..=8).contains(&self.wbits) || self.wbits == FULL_PRECISION) {
            return Err(Error::InvalidArgument(format!(
                "wbits {} must be 2..=8 or 32",
                self.wbits
            )));
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::InvalidArgument("alphas must be nonnegative".into()));
        }
        if self.ridge.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn ratio_for(&self, block: usize) -> f64 {
        self.layer_ratios
            .get(&block)
            .copied()
            .unwrap_or(self.prune_ratio)
    }

    pub fn quantizes(&self) -> bool {
        self.wbits < FULL_PRECISION
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedChannel {
    pub channel: usize,
    /// Scales over the kept channels (empty when `dead`).
    pub s_hat: Vec<f64>,
    pub l_p: f64,
    pub ridge: f64,
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedChannelReport {
    /// Channel index after pruning.
    pub channel: usize,
    pub s_tilde: f64,
    pub l_q: f64,
    pub degenerate: bool,
    /// False when there is no successor to absorb the scale.
    pub compensated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Index into `Network::layers`.
    pub layer: usize,
    /// Conv block index; `None` for the linear head.
    pub block: Option<usize>,
    pub kind: String,
    pub channels_before: usize,
    pub channels_after: usize,
    pub pruned: Vec<usize>,
    pub kept: Vec<usize>,
    pub pruned_count: usize,
    pub loss: LossBreakdown,
    pub s_hat_norm: f64,
    pub wbits: u32,
    pub size_bytes: f64,
    pub flops: u64,
    pub pruning: Vec<PrunedChannel>,
    pub quantization: Vec<QuantizedChannelReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub loss: LossBreakdown,
    pub before: Accounting,
    pub after: Accounting,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub total_secs: f64,
    pub per_layer_secs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub flops_unit: String,
    pub config: CompressionConfig,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    /// Evaluation results attached after the fact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
    /// Wall-clock times; kept out of the serialized report so it stays reproducible.
    #[serde(skip)]
    pub timings: Timings,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    layer: &'a str,
    pruned_count: usize,
    l_p: f64,
    l_q: f64,
    l_re: f64,
    s_hat_norm: f64,
    wbits: u32,
    size_bytes: f64,
    flops: u64,
}

impl Report {
    /// Pruning decisions with `layer_index` pointing into `Network::layers`.
    pub fn decisions(&self) -> Vec<PruneDecision> {
        self.layers
            .iter()
            .filter(|l| l.block.is_some())
            .map(|l| PruneDecision {
                layer_index: l.layer,
                pruned: l.pruned.clone(),
                kept: l.kept.clone(),
                criterion: self.config.criterion,
                ratio: if l.pruned.is_empty() {
                    0.0
                } else {
                    self.config.ratio_for(l.block.unwrap_or_default())
                },
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.layers {
            let name = l.block.map_or_else(|| "head".to_string(), |b| b.to_string());
            w.serialize(CsvRow {
                layer: &name,
                pruned_count: l.pruned_count,
                l_p: l.loss.l_p,
                l_q: l.loss.l_q,
                l_re: l.loss.l_re,
                s_hat_norm: l.s_hat_norm,
                wbits: l.wbits,
                size_bytes: l.size_bytes,
                flops: l.flops,
            })
            .map_err(|e| Error::InvalidArgument(format!("csv encoding failed: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Per-layer Gram matrix of flattened output-channel weights, in f64.
struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    fn of(weight: &Tensor) -> Self {
        let n = weight.shape()[0];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|o| weight.row(o).iter().map(|&v| v as f64).collect())
            .collect();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|r| {
                (r..n)
                    .map(|c| rows[r].iter().zip(&rows[c]).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        let mut data = vec![0.0; n * n];
        for (r, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                data[r * n + r + off] = v;
                data[(r + off) * n + r] = v;
            }
        }
        Self { n, data }
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }
}

/// Solves the scales for pruned channel `j` reusing the layer Gram matrix.
/// Returns `(s_hat, l_p, ridge)`.
fn solve_channel(
    layer: &ConvBlock,
    gram: &Gram,
    j: usize,
    kept: &[usize],
    cfg: &CompressionConfig,
) -> Result<(Vec<f64>, f64, f64)> {
    let pack = build_pruning_system(layer, j, kept)?;
    let target = layer.channel_affine(j);
    let ratios: Vec<f64> = kept
        .iter()
        .map(|&i| layer.channel_affine(i).scale / target.scale)
        .collect();
    let n = kept.len();
    let mut a = SymMatrix::zeros(n);
    let mut b = vec![0.0; n];
    for r in 0..n {
        for c in 0..=r {
            let v = ratios[r] * ratios[c] * gram.get(kept[r], kept[c])
                + cfg.alpha1 * pack.p[r] * pack.p[c];
            a.set(r, c, v);
            a.set(c, r, v);
        }
        b[r] = ratios[r] * gram.get(kept[r], j) + cfg.alpha1 * pack.p[r] * pack.k_pruned;
    }
    let qtq_trace: f64 = (0..n).map(|r| ratios[r] * ratios[r] * gram.get(kept[r], kept[r])).sum();
    let default = DEFAULT_RIDGE_FACTOR * qtq_trace / n as f64;
    let mut ridge = cfg.ridge.unwrap_or(default);
    let mut attempt = 0;
    let s_hat = loop {
        let mut sys = a.clone();
        sys.add_diagonal(ridge);
        match Cholesky::new(&sys) {
            Ok(ch) => break ch.solve(&b),
            Err(Error::Singular { .. }) if attempt < RIDGE_RETRIES => {
                attempt += 1;
                ridge = if ridge > 0.0 { ridge * 100.0 } else { default.max(f64::MIN_POSITIVE) };
            }
            Err(e) => return Err(e),
        }
    };
    let l_p = pruning_loss(&pack, &s_hat, cfg.alpha1);
    Ok((s_hat, l_p, ridge))
}

fn split_pair(layers: &mut [Layer], a: usize, b: usize) -> (&mut ConvBlock, NextLayer<'_>) {
    debug_assert!(a < b);
    let (lo, hi) = layers.split_at_mut(b);
    let Layer::Conv(conv) = &mut lo[a] else {
        unreachable!("layer {a} is a conv block")
    };
    let next = match &mut hi[0] {
        Layer::Conv(c) => NextLayer::Conv(c),
        Layer::Linear(l) => NextLayer::Head(l),
        _ => unreachable!("successor is a conv or linear layer"),
    };
    (conv, next)
}

/// Compresses `net` according to `cfg`, returning the new network and a report.
pub fn compress(net: &Network, cfg: &CompressionConfig) -> Result<(Network, Report)> {
    let started = Instant::now();
    net.validate()?;
    cfg.validate()?;
    let before = Accounting::of(net)?;
    let mut out = net.clone();
    let mut layer_reports = Vec::new();
    let mut per_layer_secs = Vec::new();

    let conv_indices = net.conv_indices();
    for (block, &li) in conv_indices.iter().enumerate() {
        let t0 = Instant::now();
        let successor = out.successor(li);
        let next_index = match successor {
            Successor::Conv(i) | Successor::Head(i) => Some(i),
            Successor::None => None,
        };
        let is_last = !matches!(successor, Successor::Conv(_));
        let conv = out.conv_at(li).expect("conv index");
        let channels_before = conv.out_channels();
        let mut warnings = Vec::new();
        let mut pruning = Vec::new();
        let mut loss = LossBreakdown::default();
        let ratio = cfg.ratio_for(block);

        let mut decision = PruneDecision::keep_all(block, channels_before, cfg.criterion);
        let wants_pruning = ratio > 0.0 && !cfg.skip_layers.contains(&block);
        if wants_pruning && is_last {
            warnings.push("last conv block is not pruned".to_string());
        } else if wants_pruning && conv.bn.is_none() {
            let msg = format!("block {block} has no batch norm; not pruned");
            warn!("{msg}");
            warnings.push(msg);
        } else if wants_pruning {
            decision = select_pruned(block, &channel_norm(&conv.weight, cfg.criterion), ratio, cfg.criterion)?;
        }

        if !decision.pruned.is_empty() {
            let next_index = next_index.expect("non-last blocks have a successor");
            let gram = Gram::of(&conv.weight);
            let kept = decision.kept.clone();
            pruning = decision
                .pruned
                .par_iter()
                .map(|&j| match solve_channel(conv, &gram, j, &kept, cfg) {
                    Ok((s_hat, l_p, ridge)) => Ok(PrunedChannel {
                        channel: j,
                        s_hat,
                        l_p,
                        ridge,
                        dead: false,
                    }),
                    Err(Error::DeadChannel { .. }) => Ok(PrunedChannel {
                        channel: j,
                        s_hat: Vec::new(),
                        l_p: 0.0,
                        ridge: 0.0,
                        dead: true,
                    }),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            for p in pruning.iter().filter(|p| p.dead) {
                warnings.push(format!("channel {} is dead; pruned without compensation", p.channel));
            }
            let comps: Vec<Compensation<'_>> = pruning
                .iter()
                .filter(|p| !p.dead)
                .map(|p| Compensation {
                    pruned: p.channel,
                    s_hat: &p.s_hat,
                })
                .collect();
            let (conv, next) = split_pair(&mut out.layers, li, next_index);
            apply_prune_reconstruction_many(conv, next, &kept, &comps)?;
            loss.l_p = pruning.iter().map(|p| p.l_p).sum();
        }

        let mut quantization = Vec::new();
        if cfg.quantizes() {
            let conv = out.conv_at(li).expect("conv index");
            let ql = quantize_layer(&conv.weight, cfg.wbits, cfg.granularity)?;
            for (m, ch) in ql.channels.iter().enumerate() {
                let terms = build_quant_terms(conv, m, &ch.dequant)?;
                let scale = solve_quant_scale(&terms, cfg.alpha2)?;
                quantization.push(QuantizedChannelReport {
                    channel: m,
                    s_tilde: scale.value,
                    l_q: quant_loss(&terms, scale.value, cfg.alpha2),
                    degenerate: scale.degenerate,
                    compensated: next_index.is_some(),
                });
            }
            match next_index {
                Some(ni) => {
                    let (conv, mut next) = split_pair(&mut out.layers, li, ni);
                    conv.weight = ql.dequant;
                    let w = match &mut next {
                        NextLayer::Conv(c) => &mut c.weight,
                        NextLayer::Head(l) => &mut l.weight,
                    };
                    for q in &quantization {
                        scale_input_slice(w, q.channel, q.s_tilde);
                    }
                    conv.wbits = cfg.wbits;
                }
                None => {
                    let conv = out.conv_at_mut(li).expect("conv index");
                    conv.weight = ql.dequant;
                    conv.wbits = cfg.wbits;
                }
            }
            loss.l_q = quantization.iter().map(|q| q.l_q).sum();
        }
        loss = LossBreakdown::new(loss.l_p, loss.l_q);

        let s_hat_norm = pruning
            .iter()
            .flat_map(|p| p.s_hat.iter())
            .fold(0.0, |acc, s| acc + s * s)
            .sqrt();
        let conv = out.conv_at(li).expect("conv index");
        layer_reports.push(LayerReport {
            layer: li,
            block: Some(block),
            kind: "conv".into(),
            channels_before,
            channels_after: conv.out_channels(),
            pruned_count: decision.pruned.len(),
            pruned: decision.pruned,
            kept: decision.kept,
            loss,
            s_hat_norm,
            wbits: conv.wbits,
            size_bytes: 0.0,
            flops: 0,
            pruning,
            quantization,
            warnings,
        });
        per_layer_secs.push((li, t0.elapsed().as_secs_f64()));
    }

    if let Some(Layer::Linear(head)) = out.layers.last_mut() {
        let li = net.layers.len() - 1;
        let t0 = Instant::now();
        if cfg.quantizes() {
            head.weight = quantize_layer(&head.weight, cfg.wbits, cfg.granularity)?.dequant;
            head.wbits = cfg.wbits;
        }
        let n = head.out_features();
        layer_reports.push(LayerReport {
            layer: li,
            block: None,
            kind: "linear".into(),
            channels_before: n,
            channels_after: n,
            pruned: Vec::new(),
            kept: (0..n).collect(),
            pruned_count: 0,
            loss: LossBreakdown::default(),
            s_hat_norm: 0.0,
            wbits: head.wbits,
            size_bytes: 0.0,
            flops: 0,
            pruning: Vec::new(),
            quantization: Vec::new(),
            warnings: Vec::new(),
        });
        per_layer_secs.push((li, t0.elapsed().as_secs_f64()));
    }

    out.validate()?;
    let flops = accounting::layer_flops(&out)?;
    for r in &mut layer_reports {
        r.size_bytes = accounting::layer_size_bytes(&out.layers[r.layer], r.wbits).unwrap_or(0.0);
        r.flops = flops[r.layer];
    }
    let mut total = LossBreakdown::default();
    for r in &layer_reports {
        total.accumulate(r.loss);
    }
    let report = Report {
        format: "udfc-report-1".into(),
        flops_unit: "MAC".into(),
        config: cfg.clone(),
        layers: layer_reports,
        totals: Totals {
            loss: total,
            before,
            after: Accounting::of(&out)?,
        },
        eval: None,
        timings: Timings {
            total_secs: started.elapsed().as_secs_f64(),
            per_layer_secs,
        },
    };
    Ok((out, report))
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub prune_ratio: f64,
    pub wbits: u32,
    pub network: Network,
    pub report: Report,
}

/// Compresses `net` once per `(ratio, wbits)` pair, ratios outermost.
pub fn sweep(
    net: &Network,
    base: &CompressionConfig,
    ratios: &[f64],
    wbits_list: &[u32],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(ratios.len() * wbits_list.len());
    for &prune_ratio in ratios {
        for &wbits in wbits_list {
            let cfg = CompressionConfig {
                prune_ratio,
                wbits,
                ..base.clone()
            };
            let (network, report) = compress(net, &cfg)?;
            cells.push(SweepCell {
                prune_ratio,
                wbits,
                network,
                report,
            });
        }
    }
    Ok(cells)
}
