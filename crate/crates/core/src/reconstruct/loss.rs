use serde::{Deserialize, Serialize};

use super::symbols::{QuantTerms, SymbolPack};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_q: f64,
    pub l_re: f64,
}

impl LossBreakdown {
    pub fn new(l_p: f64, l_q: f64) -> Self {
        Self {
            l_p,
            l_q,
            l_re: l_p + l_q,
        }
    }

    pub fn accumulate(&mut self, other: LossBreakdown) {
        *self = LossBreakdown::new(self.l_p + other.l_p, self.l_q + other.l_q);
    }
}

/// `||V - Q s||² + alpha1 (K_j - Pᵀ s)²`.
pub fn pruning_loss(pack: &SymbolPack, s_hat: &[f64], alpha1: f64) -> f64 {
    let qs = pack.combine(s_hat);
    let weight: f64 = pack.v.iter().zip(&qs).map(|(v, q)| (v - q).powi(2)).sum();
    let shift = pack.k_pruned - pack.p.iter().zip(s_hat).map(|(p, s)| p * s).sum::<f64>();
    weight + alpha1 * shift * shift
}

/// `||R - s R~||² + alpha2 (K - s K)²`.
pub fn quant_loss(terms: &QuantTerms, s_tilde: f64, alpha2: f64) -> f64 {
    let weight: f64 = terms
        .r
        .iter()
        .zip(&terms.r_tilde)
        .map(|(r, rt)| (r - s_tilde * rt).powi(2))
        .sum();
    let shift = terms.k - s_tilde * terms.k;
    weight + alpha2 * shift * shift
}

pub fn total_loss(
    pack: &SymbolPack,
    s_hat: &[f64],
    alpha1: f64,
    terms: &QuantTerms,
    s_tilde: f64,
    alpha2: f64,
) -> LossBreakdown {
    LossBreakdown::new(
        pruning_loss(pack, s_hat, alpha1),
        quant_loss(terms, s_tilde, alpha2),
    )
}

/// Gradient of the pruning loss with respect to `s`:
/// `-2QᵀV + 2QᵀQ s + alpha1 (-2 P K_j + 2 P Pᵀ s)`.
pub fn loss_gradient(pack: &SymbolPack, s_hat: &[f64], alpha1: f64) -> Vec<f64> {
    let qs = pack.combine(s_hat);
    let ps: f64 = pack.p.iter().zip(s_hat).map(|(p, s)| p * s).sum();
    (0..pack.columns())
        .map(|c| {
            let g = pack.column(c);
            let qtv: f64 = g.iter().zip(&pack.v).map(|(a, b)| a * b).sum();
            let qtqs: f64 = g.iter().zip(&qs).map(|(a, b)| a * b).sum();
            -2.0 * qtv + 2.0 * qtqs + alpha1 * (-2.0 * pack.p[c] * pack.k_pruned + 2.0 * pack.p[c] * ps)
        })
        .collect()
}
