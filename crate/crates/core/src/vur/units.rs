//! Run-length compression of quantized visual frames into discrete units.
//! Maximal spans of identical labels collapse into one (label, mean
//! feature, span length) token, so the label stream reconstructs exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualUnit {
    pub label: usize,
    /// Arithmetic mean of the span's frames.
    pub feature: Vec<f64>,
    pub span: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualUnitSequence {
    pub units: Vec<VisualUnit>,
}

impl VisualUnitSequence {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.label).collect()
    }

    pub fn total_span(&self) -> usize {
        self.units.iter().map(|u| u.span).sum()
    }

    /// Re-expand each unit's label over its span; the exact inverse of
    /// compression on the label stream.
    pub fn expand_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_span());
        for u in &self.units {
            out.extend(std::iter::repeat(u.label).take(u.span));
        }
        out
    }

    /// D x M feature matrix of the averaged features.
    pub fn feature_matrix(&self) -> Matrix {
        assert!(!self.units.is_empty(), "feature_matrix on empty unit sequence");
        let d = self.units[0].feature.len();
        Matrix::from_fn(self.units.len(), d, |m, c| self.units[m].feature[c])
    }
}

/// Collapse maximal runs of identical labels, averaging each run's frames.
pub fn rle_compress(labels: &[usize], frames: &Matrix) -> Result<VisualUnitSequence> {
    if labels.len() != frames.rows() {
        return Err(CoreError::ShapeMismatch(format!(
            "rle_compress: {} labels for {} frames",
            labels.len(),
            frames.rows()
        )));
    }
    if labels.is_empty() {
        return Err(CoreError::InvalidArg("rle_compress: empty sequence".into()));
    }
    let d = frames.cols();
    let mut units = Vec::new();
    let mut start = 0usize;
    while start < labels.len() {
        let label = labels[start];
        let mut end = start + 1;
        while end < labels.len() && labels[end] == label {
            end += 1;
        }
        let span = end - start;
        let mut feature = vec![0.0; d];
        for t in start..end {
            for (f, v) in feature.iter_mut().zip(frames.row(t)) {
                *f += v;
            }
        }
        let inv = 1.0 / span as f64;
        for f in &mut feature {
            *f *= inv;
        }
        units.push(VisualUnit { label, feature, span });
        start = end;
    }
    Ok(VisualUnitSequence { units })
}

/// Per-utterance unit cache: units are computed once and the same object is
/// handed out on every subsequent request.
#[derive(Debug, Default)]
pub struct UnitCache {
    entries: BTreeMap<String, Arc<VisualUnitSequence>>,
}

impl UnitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute(
        &mut self,
        utt_id: &str,
        compute: impl FnOnce() -> Result<VisualUnitSequence>,
    ) -> Result<Arc<VisualUnitSequence>> {
        if let Some(u) = self.entries.get(utt_id) {
            return Ok(Arc::clone(u));
        }
        let units = Arc::new(compute()?);
        self.entries.insert(utt_id.to_string(), Arc::clone(&units));
        Ok(units)
    }
}
