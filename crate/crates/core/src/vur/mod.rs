//! Visual unit-guided refinement: K-means discretization of mid-layer
//! visual features, run-length compression into unit tokens, prompt
//! assembly, the LoRA-adapted scorer, and N-best rescoring.

pub mod kmeans;
pub mod prompt;
pub mod rescore;
pub mod scorer;
pub mod units;

pub use kmeans::{kmeans_fit, quantize, quantize_frames, Codebook};
pub use prompt::{build_prompt, Prompt, PROMPT_TEMPLATE, PROMPT_TEMPLATE_VERSION};
pub use rescore::{
    edit_distance, listwise_loss, listwise_loss_grad, listwise_loss_on_tape, rescore, select_oracle,
    RescoredList,
};
pub use scorer::{
    train_scorer, LoraLinear, RescoreExample, ScorerConfig, UnitScorer, SCORER_TRAINABLE_PREFIXES,
};
pub use units::{rle_compress, UnitCache, VisualUnit, VisualUnitSequence};
