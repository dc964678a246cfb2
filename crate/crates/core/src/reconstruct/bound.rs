//! Effect of ReLU on the pruning error.
//!
//! With `B_c` the BN output of channel `c` and `A = B_j - sum_i s_i B_i`, the
//! post-activation error is `e_p = ReLU(B_j) - sum_i s_i ReLU(B_i)`. For
//! nonnegative `s`, subadditivity and positive homogeneity of ReLU give
//! `e_p <= ReLU(A) = (A + |A|) / 2`. Negative coefficients can break it.

use crate::error::{Error, Result};

/// Pre-activation difference `A` and the post-activation errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTerms {
    pub shape: Vec<usize>,
    pub a: Vec<f64>,
    pub e_p: Vec<f64>,
    pub e_q: Vec<f64>,
}

/// `A` and `e_p` for one pruned channel from per-channel BN outputs (same shape each).
pub fn pruning_error_terms(
    bn_pruned: &[f32],
    bn_kept: &[&[f32]],
    s_hat: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if bn_kept.len() != s_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} kept maps for {} scales",
            bn_kept.len(),
            s_hat.len()
        )));
    }
    if let Some(m) = bn_kept.iter().find(|m| m.len() != bn_pruned.len()) {
        return Err(Error::ShapeMismatch(format!(
            "kept map has {} values, pruned map {}",
            m.len(),
            bn_pruned.len()
        )));
    }
    let relu = |v: f64| v.max(0.0);
    let mut a = Vec::with_capacity(bn_pruned.len());
    let mut e_p = Vec::with_capacity(bn_pruned.len());
    for (t, &bj) in bn_pruned.iter().enumerate() {
        let (mut lin, mut act) = (bj as f64, relu(bj as f64));
        for (m, &s) in bn_kept.iter().zip(s_hat) {
            let b = m[t] as f64;
            lin -= s * b;
            act -= s * relu(b);
        }
        a.push(lin);
        e_p.push(act);
    }
    Ok((a, e_p))
}

/// `X_m - s~ X~_m` for a quantized channel.
pub fn quant_error_term(x: &[f32], x_tilde: &[f32], s_tilde: f64) -> Result<Vec<f64>> {
    if x.len() != x_tilde.len() {
        return Err(Error::ShapeMismatch(format!(
            "maps of {} and {} values",
            x.len(),
            x_tilde.len()
        )));
    }
    Ok(x.iter()
        .zip(x_tilde)
        .map(|(&a, &b)| a as f64 - s_tilde * b as f64)
        .collect())
}

/// Elementwise `e_p <= (A + |A|) / 2`.
pub fn relu_bound_check(a: &[f64], e_p: &[f64]) -> Result<Vec<bool>> {
    if a.len() != e_p.len() {
        return Err(Error::ShapeMismatch(format!(
            "A has {} values, e_p {}",
            a.len(),
            e_p.len()
        )));
    }
    Ok(a.iter()
        .zip(e_p)
        .map(|(&a, &e)| e <= 0.5 * (a + a.abs()))
        .collect())
}

/// Number of elements violating the bound.
pub fn bound_violations(a: &[f64], e_p: &[f64]) -> Result<usize> {
    Ok(relu_bound_check(a, e_p)?.iter().filter(|ok| !**ok).count())
}
