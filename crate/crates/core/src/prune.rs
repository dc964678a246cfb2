//! Channel importance scoring and pruned-set selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Criterion::L1),
            "l2" => Ok(Criterion::L2),
            other => Err(Error::InvalidArgument(format!(
                "unknown criterion {other:?} (expected l1 or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layer_index: usize,
    /// Sorted ascending.
    pub pruned: Vec<usize>,
    /// Sorted ascending.
    pub kept: Vec<usize>,
    pub criterion: Criterion,
    pub ratio: f64,
}

impl PruneDecision {
    /// Decision that removes nothing.
    pub fn keep_all(layer_index: usize, channels: usize, criterion: Criterion) -> Self {
        Self {
            layer_index,
            pruned: Vec::new(),
            kept: (0..channels).collect(),
            criterion,
            ratio: 0.0,
        }
    }
}

/// Per-output-channel l1 or l2 norm over the `I x K x K` slice.
pub fn channel_norm(weights: &Tensor, criterion: Criterion) -> Vec<f64> {
    (0..weights.shape()[0])
        .map(|o| {
            let row = weights.row(o);
            match criterion {
                Criterion::L1 => row.iter().map(|v| v.abs() as f64).sum(),
                Criterion::L2 => row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
            }
        })
        .collect()
}

/// Prunes the `floor(ratio * n)` lowest-scoring channels; ties prune the lower index first.
pub fn select_pruned(
    layer_index: usize,
    scores: &[f64],
    ratio: f64,
    criterion: Criterion,
) -> Result<PruneDecision> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "prune ratio {ratio} outside [0, 1)"
        )));
    }
    let n = scores.len();
    let count = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut pruned = order[..count].to_vec();
    pruned.sort_unstable();
    let kept = (0..n).filter(|i| pruned.binary_search(i).is_err()).collect();
    Ok(PruneDecision {
        layer_index,
        pruned,
        kept,
        criterion,
        ratio,
    })
}
