//! Audio-visual sequence recognition at desk scale: a frozen pair of toy
//! encoders, sparse audio-guided visual alignment, a decoder with
//! confidence-gated visual fusion and beam-search N-best output, and a
//! discrete-visual-unit scorer for list-wise rescoring.

pub mod error;
pub mod numerics;

pub mod features;

pub mod encoders;
pub mod sma;

pub mod amf;
pub mod decoder;
pub mod model;
pub mod nbest;
pub mod train;
pub mod vur;

pub use error::{CoreError, Result};
