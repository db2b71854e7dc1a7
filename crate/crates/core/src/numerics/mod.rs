//! Deterministic f64 linear algebra with reverse-mode differentiation.
//!
//! Everything downstream (encoders, alignment, the fused decoder, the
//! rescoring scorer) is built from the [`Tape`] ops defined here. The tape
//! enforces two contracts the rest of the crate leans on: gradients blocked
//! by [`Tape::stop_grad`] are exactly zero (the accumulator is never
//! touched), and all computation is pure f64 so fixed seeds give bitwise
//! reproducible results.

mod blocks;
mod fd;
mod matrix;
mod optim;
mod param;
mod tape;

pub use blocks::{
    causal_mask, layer_norm, mha, softmax_rows, AttentionConfig, FfwParams, LayerNormParams,
    LinearParams, MhaParams,
};
pub use fd::{check_gradients, finite_diff_grad, max_rel_error, rel_error, FD_STEP, GRAD_REL_TOL};
pub use matrix::Matrix;
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{NodeId, Tape};

pub(crate) use tape::{log_softmax_row, row_entropy_kernel, sigmoid};
