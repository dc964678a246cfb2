use serde::{Deserialize, Serialize};

use super::loss::{pruning_loss, quant_loss, LossBreakdown};
use super::symbols::{QuantTerms, SymbolPack};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, SymMatrix};

/// Relative ridge used when the caller does not pick one: `1e-8 * trace(QᵀQ) / |I|`.
pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-8;

/// `QᵀQ + alpha1 P Pᵀ` and `QᵀV + alpha1 P K_j`.
pub fn normal_equations(pack: &SymbolPack, alpha1: f64) -> (SymMatrix, Vec<f64>) {
    let n = pack.columns();
    let mut a = SymMatrix::zeros(n);
    let mut b = vec![0.0; n];
    for r in 0..n {
        let gr = pack.column(r);
        for c in 0..=r {
            let dot: f64 = gr.iter().zip(pack.column(c)).map(|(x, y)| x * y).sum();
            let v = dot + alpha1 * pack.p[r] * pack.p[c];
            a.set(r, c, v);
            a.set(c, r, v);
        }
        let qv: f64 = gr.iter().zip(&pack.v).map(|(x, y)| x * y).sum();
        b[r] = qv + alpha1 * pack.p[r] * pack.k_pruned;
    }
    (a, b)
}

/// Ridge that keeps the system positive definite when kept channels are collinear.
pub fn default_ridge(pack: &SymbolPack) -> f64 {
    let trace: f64 = pack.q.iter().map(|g| g * g).sum();
    DEFAULT_RIDGE_FACTOR * trace / pack.columns().max(1) as f64
}

/// Closed-form minimizer of the pruning loss:
/// `(QᵀQ + alpha1 P Pᵀ + ridge I) s = QᵀV + alpha1 P K_j`.
pub fn solve_pruning_scales(pack: &SymbolPack, alpha1: f64, ridge: f64) -> Result<Vec<f64>> {
    if !(alpha1 >= 0.0) || !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha1 ({alpha1}) and ridge ({ridge}) must be nonnegative"
        )));
    }
    let (mut a, b) = normal_equations(pack, alpha1);
    a.add_diagonal(ridge);
    Ok(Cholesky::new(&a)?.solve(&b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScale {
    pub value: f64,
    /// Set when the quantized channel and its shift are both zero; `value` is then 1.
    pub degenerate: bool,
}

/// Minimizer of `||R - s R~||² + alpha2 (K - s K)²`:
/// `s = (R~ᵀR + alpha2 K²) / (R~ᵀR~ + alpha2 K²)`.
pub fn solve_quant_scale(terms: &QuantTerms, alpha2: f64) -> Result<QuantScale> {
    if !(alpha2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha2 ({alpha2}) must be nonnegative"
        )));
    }
    let k2 = alpha2 * terms.k * terms.k;
    let num: f64 = terms.r_tilde.iter().zip(&terms.r).map(|(a, b)| a * b).sum::<f64>() + k2;
    let den: f64 = terms.r_tilde.iter().map(|a| a * a).sum::<f64>() + k2;
    if den <= 0.0 {
        return Ok(QuantScale {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(QuantScale {
        value: num / den,
        degenerate: false,
    })
}

/// Scales for one pruned channel and one quantized channel solved together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSolution {
    pub s_hat: Vec<f64>,
    pub s_tilde: f64,
    pub loss: LossBreakdown,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Minimizes the joint loss; the pruning and quantization terms are separable.
pub fn solve_joint(
    pack: &SymbolPack,
    terms: &QuantTerms,
    alpha1: f64,
    alpha2: f64,
    ridge: f64,
) -> Result<ScaleSolution> {
    let s_hat = solve_pruning_scales(pack, alpha1, ridge)?;
    let s_tilde = solve_quant_scale(terms, alpha2)?.value;
    let l_p = pruning_loss(pack, &s_hat, alpha1);
    let l_q = quant_loss(terms, s_tilde, alpha2);
    Ok(ScaleSolution {
        s_hat,
        s_tilde,
        loss: LossBreakdown::new(l_p, l_q),
        alpha1,
        alpha2,
    })
}
