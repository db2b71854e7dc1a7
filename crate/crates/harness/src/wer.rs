//! Word error rate over token sequences: (substitutions + insertions +
//! deletions) / reference length, which can exceed 1.

use avur_core::vur::edit_distance;

use crate::error::{HarnessError, Result};

pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(HarnessError::Config("wer: empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference length.
#[derive(Debug, Clone, Copy, Default)]
pub struct WerAccumulator {
    pub edits: usize,
    pub ref_len: usize,
}

impl WerAccumulator {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) {
        self.edits += edit_distance(reference, hypothesis);
        self.ref_len += reference.len();
    }

    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.edits as f64 / self.ref_len as f64
        }
    }
}
