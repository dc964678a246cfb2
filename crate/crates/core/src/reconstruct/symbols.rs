use crate::error::{Error, Result};
use crate::model::ConvBlock;

/// BN scales below this magnitude mark a channel as dead.
pub const DEAD_GAMMA: f64 = 1e-12;

/// Vectorized quantities for representing pruned channel `j` by the kept set.
///
/// With `a_c = gamma_c / sigma_c` and `K_c = beta_c - a_c * (mu_c - bias_c)`:
///
/// * `G_i = (a_i / a_j) W_i` for each kept `i`, stored as the columns of `Q`
/// * `V = W_j`
/// * `P = [K_i]` over the kept set, and `K_j` for the pruned channel
///
/// Weight slices are flattened in IHW row-major order, `D = I * K * K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolPack {
    pub pruned: usize,
    pub kept: Vec<usize>,
    pub dim: usize,
    /// Column-major `D x |kept|`.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub k_pruned: f64,
}

impl SymbolPack {
    pub fn columns(&self) -> usize {
        self.kept.len()
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.q[c * self.dim..(c + 1) * self.dim]
    }

    /// `Q s`.
    pub fn combine(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, &sc) in s.iter().enumerate() {
            for (o, g) in out.iter_mut().zip(self.column(c)) {
                *o += sc * g;
            }
        }
        out
    }
}

/// Quantities for the quantized channel `m`: `R = a_m W_m`, `R~ = a_m W~_m`
/// and the shift `K_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTerms {
    pub channel: usize,
    pub r: Vec<f64>,
    pub r_tilde: Vec<f64>,
    pub k: f64,
}

fn is_dead(layer: &ConvBlock, c: usize) -> bool {
    layer
        .bn
        .as_ref()
        .is_some_and(|bn| (bn.gamma[c] as f64).abs() < DEAD_GAMMA)
}

fn check_index(layer: &ConvBlock, c: usize) -> Result<()> {
    let n = layer.out_channels();
    if c >= n {
        return Err(Error::IndexOutOfRange {
            what: "output channels",
            index: c,
            len: n,
        });
    }
    Ok(())
}

/// Assembles the least-squares system for pruned channel `pruned` of `layer`.
///
/// Layers without BN use the identity affine (plus conv bias).
pub fn build_pruning_system(layer: &ConvBlock, pruned: usize, kept: &[usize]) -> Result<SymbolPack> {
    check_index(layer, pruned)?;
    if kept.is_empty() {
        return Err(Error::InvalidArgument("kept set is empty".into()));
    }
    for &i in kept {
        check_index(layer, i)?;
        if i == pruned {
            return Err(Error::InvalidArgument(format!(
                "channel {pruned} is both pruned and kept"
            )));
        }
    }
    if is_dead(layer, pruned) {
        return Err(Error::DeadChannel { channel: pruned });
    }
    let target = layer.channel_affine(pruned);
    let dim = layer.weight.row_len();
    let mut q = Vec::with_capacity(dim * kept.len());
    let mut p = Vec::with_capacity(kept.len());
    for &i in kept {
        let aff = layer.channel_affine(i);
        let ratio = aff.scale / target.scale;
        q.extend(layer.weight.row(i).iter().map(|&w| ratio * w as f64));
        p.push(aff.shift);
    }
    Ok(SymbolPack {
        pruned,
        kept: kept.to_vec(),
        dim,
        q,
        v: layer.weight.row(pruned).iter().map(|&w| w as f64).collect(),
        p,
        k_pruned: target.shift,
    })
}

/// Assembles `R`, `R~` and `K_m` for channel `m` with dequantized weights `w_tilde`.
pub fn build_quant_terms(layer: &ConvBlock, m: usize, w_tilde: &[f32]) -> Result<QuantTerms> {
    check_index(layer, m)?;
    let w = layer.weight.row(m);
    if w_tilde.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "quantized channel has {} values, expected {}",
            w_tilde.len(),
            w.len()
        )));
    }
    let aff = layer.channel_affine(m);
    Ok(QuantTerms {
        channel: m,
        r: w.iter().map(|&v| aff.scale * v as f64).collect(),
        r_tilde: w_tilde.iter().map(|&v| aff.scale * v as f64).collect(),
        k: aff.shift,
    })
}
