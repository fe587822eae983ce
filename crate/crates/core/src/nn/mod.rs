//! Minimal layer library with explicit forward/backward passes.
//!
//! Layers are stateless with respect to activations: `forward` returns
//! whatever `backward` needs, and parameters live in a [`ParamSet`] owned by
//! the enclosing network.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod params;

pub use conv::{Conv2d, ConvGeometry};
pub use norm::{BatchNorm2d, BnCache};
pub use params::{Grads, ParamEntry, ParamId, ParamKind, ParamSet};

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched.
    TrainFrozenStats,
    /// Running statistics; no activation caches are kept.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}
