//! The rescoring prompt. The instruction text is a versioned resource so
//! rendering can be asserted verbatim; unit labels and candidate token ids
//! are serialized injectively into the two input sections.

use crate::nbest::NBestList;
use crate::vur::units::VisualUnitSequence;

pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

/// Rendered as: instruction, then the unit-label section, then the
/// candidate section, with `{tokens}` and `{candidates}` substituted.
pub const PROMPT_TEMPLATE: &str = "[Instruction]: You are an AVSR hypothesis evaluator. \
Given the input below, assign scores to all candidates based on lip-motion plausibility \
and linguistic coherence. Input: [Visual Units] {tokens} [Candidates] {candidates}";

/// A fully assembled prompt: the verbatim text plus the structured fields
/// the scorer consumes (labels enter as text; averaged unit features flow
/// through the learned projection instead of being serialized).
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub unit_labels: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

pub fn render_units(labels: &[usize]) -> String {
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn render_candidates(candidates: &[Vec<usize>]) -> String {
    candidates
        .iter()
        .map(|c| c.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn build_prompt(units: &VisualUnitSequence, nbest: &NBestList) -> Prompt {
    let unit_labels = units.labels();
    let candidates: Vec<Vec<usize>> = nbest.hyps.iter().map(|h| h.tokens.clone()).collect();
    let text = PROMPT_TEMPLATE
        .replace("{tokens}", &render_units(&unit_labels))
        .replace("{candidates}", &render_candidates(&candidates));
    Prompt { text, unit_labels, candidates }
}
