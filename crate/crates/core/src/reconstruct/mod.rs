//! Closed-form next-layer reconstruction.
//!
//! A pruned channel `j` of layer `l` is approximated by a linear combination
//! of the kept channels, `X_j ~ sum_i s_i X_i`. Folding the scales into layer
//! `l+1` (`W_{k,i} += s_i W_{k,j}`) restores most of its pre-activation map.
//! A quantized channel `m` keeps its slot and the next layer's input slice is
//! rescaled by a scalar `s~_m`. Both scales minimize quadratic losses over
//! weights and BN statistics only, so no data is needed.

mod apply;
mod bound;
mod loss;
mod solve;
mod symbols;

pub use apply::{
    apply_prune_reconstruction, apply_prune_reconstruction_many, apply_quant_reconstruction,
    fold_pruned_channel, Compensation, NextLayer,
};
pub(crate) use apply::scale_input_slice;
pub use bound::{bound_violations, pruning_error_terms, quant_error_term, relu_bound_check, ErrorTerms};
pub use loss::{loss_gradient, pruning_loss, quant_loss, total_loss, LossBreakdown};
pub use solve::{
    default_ridge, normal_equations, solve_joint, solve_pruning_scales, solve_quant_scale,
    QuantScale, ScaleSolution, DEFAULT_RIDGE_FACTOR,
};
pub use symbols::{build_pruning_system, build_quant_terms, QuantTerms, SymbolPack, DEAD_GAMMA};
