//! Network building blocks: conv / transposed conv, batch normalization,
//! spectral normalization, residual block, axial and all-pairs attention.

mod attention;
mod batchnorm;
mod conv;
mod residual;
mod spectral;

pub use attention::{
    attention_mac_count, reset_attention_mac_count, AxialAttention, AxialBlock, AxialTrace, Axis,
    Full2dBlock, FullAttention2d,
};
pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, Pad, TransposedConv2d};
pub use residual::ResidualBlock;
pub use spectral::{SnConv2d, SnDeconv2d, SpectralNorm};

use crate::tensor::{Param, Tape, TensorId};

/// Forward pass context. `train` selects batch statistics in normalization;
/// `update_stats` lets the owning network's pass advance running statistics
/// and power-iteration vectors (exactly once per training step); `frozen`
/// registers parameters without gradient flow, so one network can be driven
/// through while only the other one learns.
pub struct Fwd<'t> {
    pub tape: &'t mut Tape,
    pub train: bool,
    pub update_stats: bool,
    pub frozen: bool,
}

impl<'t> Fwd<'t> {
    /// The owning network's own training pass.
    pub fn train(tape: &'t mut Tape) -> Self {
        Fwd { tape, train: true, update_stats: true, frozen: false }
    }

    /// Training-mode pass without statistics updates (repeated passes within
    /// one step, finite-difference probes).
    pub fn train_no_update(tape: &'t mut Tape) -> Self {
        Fwd { tape, train: true, update_stats: false, frozen: false }
    }

    /// Training-mode pass through a network that must not learn this phase.
    pub fn train_frozen(tape: &'t mut Tape) -> Self {
        Fwd { tape, train: true, update_stats: false, frozen: true }
    }

    /// Inference: running statistics, no updates, no gradients.
    pub fn eval(tape: &'t mut Tape) -> Self {
        Fwd { tape, train: false, update_stats: false, frozen: true }
    }

    /// Running-statistics pass with gradients. Finite-difference probes of
    /// deep stacks use this: batch-statistic coupling otherwise dominates the
    /// truncation error of the probe itself.
    pub fn eval_grad(tape: &'t mut Tape) -> Self {
        Fwd { tape, train: false, update_stats: false, frozen: false }
    }

    pub fn leaf(&mut self, p: &Param) -> TensorId {
        if self.frozen {
            self.tape.leaf_frozen(p)
        } else {
            self.tape.leaf(p)
        }
    }
}
