use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
}

/// A time-major block of frame vectors with its nominal frame rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub frame_rate_hz: f64,
    pub modality: Modality,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, frame_rate_hz: f64, modality: Modality) -> Result<Self> {
        if frames.rows() < 1 {
            return Err(CoreError::InvalidArg("feature sequence needs at least one frame".into()));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(CoreError::InvalidArg("frame rate must be positive".into()));
        }
        frames.ensure_finite("feature sequence frames")?;
        Ok(FeatureSequence { frames, frame_rate_hz, modality })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// One utterance of the synthetic task: the symbol sequence, the clean
/// audio feature stream entering the audio encoder, and the viseme-level
/// visual stream entering the visual encoder. The reference transcript is
/// the symbol sequence itself.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
}

impl Utterance {
    pub fn reference(&self) -> &[usize] {
        &self.tokens
    }
}
