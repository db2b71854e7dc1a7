//! Pipeline configuration. Loaded from a flat TOML file whose sections
//! mirror the task, model, training, evaluation, and refinement knobs;
//! unknown keys are rejected.

use avur_core::model::{AvsrConfig, FusionMode};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::noise::{Condition, NoiseKind};
use crate::task::ToyTaskConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub vocab_size: usize,
    pub num_visemes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub audio_jitter: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = ToyTaskConfig::default();
        TaskSection {
            vocab_size: t.vocab_size,
            num_visemes: t.num_visemes,
            min_len: t.min_len,
            max_len: t.max_len,
            train_size: t.train_size,
            dev_size: t.dev_size,
            test_size: t.test_size,
            audio_jitter: t.audio_jitter,
        }
    }
}

impl TaskSection {
    pub fn to_task(&self, seed: u64) -> ToyTaskConfig {
        ToyTaskConfig {
            vocab_size: self.vocab_size,
            num_visemes: self.num_visemes,
            min_len: self.min_len,
            max_len: self.max_len,
            train_size: self.train_size,
            dev_size: self.dev_size,
            test_size: self.test_size,
            audio_jitter: self.audio_jitter,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_a: usize,
    pub d_v: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub ffw_hidden: usize,
    pub max_len: usize,
    /// 1-based audio encoder layers hosting alignment blocks; empty selects
    /// the top three.
    pub sma_layers: Vec<usize>,
    /// Keep the probe projections frozen during stage-1 training.
    pub freeze_probe: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_a: 16,
            d_v: 12,
            enc_depth: 4,
            enc_heads: 2,
            dec_depth: 2,
            dec_heads: 2,
            ffw_hidden: 32,
            max_len: 64,
            sma_layers: Vec::new(),
            freeze_probe: false,
        }
    }
}

impl ModelSection {
    pub fn to_avsr(&self, symbols: usize, visemes: usize) -> AvsrConfig {
        AvsrConfig {
            symbols,
            visemes,
            d_a: self.d_a,
            d_v: self.d_v,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            ffw_hidden: self.ffw_hidden,
            max_len: self.max_len,
            fusion: FusionMode::Gated,
            use_sma: true,
            sma_insertion: self.sma_layers.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub stage2_batch: usize,
    pub lr_stage0: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// dB levels mixed into training batches (clean is always included).
    pub snr_grid: Vec<i32>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage0_steps: 1300,
            stage1_steps: 900,
            stage2_steps: 700,
            batch_size: 8,
            stage2_batch: 4,
            lr_stage0: 1e-2,
            lr_stage1: 5e-3,
            lr_stage2: 3e-3,
            weight_decay: 0.01,
            clip_norm: 5.0,
            snr_grid: vec![10, 5, 0, -5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_best: usize,
    pub beam_width: usize,
    /// Extra generated tokens allowed past the longest reference.
    pub max_gen_margin: usize,
    /// dB levels evaluated in addition to clean.
    pub snr_grid: Vec<i32>,
    pub noise: NoiseKind,
    /// Interpolation weight on the first-pass score during rescoring;
    /// 0 ranks by the scorer alone.
    pub lambda: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_best: 5,
            beam_width: 8,
            max_gen_margin: 6,
            snr_grid: vec![10, 5, 0, -5, -10],
            noise: NoiseKind::Babble,
            lambda: 0.0,
        }
    }
}

impl EvalSection {
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = vec![Condition::Clean];
        out.extend(self.snr_grid.iter().map(|&db| Condition::SnrDb(db)));
        out
    }
}

impl TrainSection {
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = vec![Condition::Clean];
        out.extend(self.snr_grid.iter().map(|&db| Condition::SnrDb(db)));
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VurSection {
    /// Codebook size.
    pub k: usize,
    /// 1-based visual encoder layer feeding quantization.
    pub layer: usize,
    pub kmeans_iters: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Sweep grid for the codebook size.
    pub sweep_k: Vec<usize>,
}

impl Default for VurSection {
    fn default() -> Self {
        VurSection {
            k: 16,
            layer: 2,
            kmeans_iters: 40,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.05,
            sweep_k: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Vec<u64>,
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub vur: VurSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seeds: vec![1, 2, 3],
            task: TaskSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            vur: VurSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// A reduced profile for smoke tests and the determinism check:
    /// complete end to end, minutes smaller than the default.
    pub fn smoke() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.seeds = vec![1];
        cfg.task.train_size = 60;
        cfg.task.dev_size = 8;
        cfg.task.test_size = 16;
        cfg.train.stage0_steps = 120;
        cfg.train.stage1_steps = 80;
        cfg.train.stage2_steps = 60;
        cfg.eval.snr_grid = vec![0];
        cfg.vur.k = 8;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back.seeds, cfg.seeds);
        assert_eq!(back.task.vocab_size, cfg.task.vocab_size);
        assert_eq!(back.eval.snr_grid, cfg.eval.snr_grid);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("[task]\nvocab_size = 10\nbogus_knob = 3\n");
        assert!(err.is_err());
        let err = PipelineConfig::from_toml("top_level_mystery = true\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = PipelineConfig::from_toml("[eval]\nn_best = 3\n").unwrap();
        assert_eq!(cfg.eval.n_best, 3);
        assert_eq!(cfg.eval.beam_width, 8);
        assert_eq!(cfg.task.vocab_size, 20);
    }

    #[test]
    fn conditions_include_clean_first() {
        let cfg = PipelineConfig::default();
        let conds = cfg.eval.conditions();
        assert_eq!(conds[0], Condition::Clean);
        assert_eq!(conds.len(), 6);
    }
}
