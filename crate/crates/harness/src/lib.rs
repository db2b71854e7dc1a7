//! Experiment harness for the audio-visual recognizer: synthetic task
//! generation, SNR-controlled noise, two-stage training orchestration,
//! WER evaluation, ablations, sweeps, and CSV reporting.

pub mod config;
pub mod error;
pub mod noise;
pub mod report;
pub mod runner;
pub mod seeds;
pub mod task;
pub mod wer;

pub use error::{HarnessError, Result};
