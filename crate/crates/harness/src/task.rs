//! The synthetic audio-visual task. Symbols are drawn uniformly; the audio
//! stream is the audio encoder's per-symbol embedding stream (4 frames per
//! symbol) with small jitter, and the visual stream is the viseme-level
//! embedding stream (1 frame per symbol) with no jitter, so utterances that
//! differ only within a viseme class are visually indistinguishable.

use avur_core::features::{FeatureSequence, Modality, Utterance};
use avur_core::model::AvsrModel;
use avur_core::numerics::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::seeds::mix_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTaskConfig {
    pub vocab_size: usize,
    pub num_visemes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Standard deviation of the per-frame jitter on the audio stream.
    pub audio_jitter: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            vocab_size: 20,
            num_visemes: 8,
            min_len: 5,
            max_len: 12,
            train_size: 500,
            dev_size: 50,
            test_size: 100,
            audio_jitter: 0.05,
            seed: 1,
        }
    }
}

impl ToyTaskConfig {
    /// Many-to-one symbol-to-viseme map. With vocab 20 over 8 visemes this
    /// gives classes of size 2 and 3, so lip reading alone is ambiguous.
    pub fn viseme_map(&self) -> Vec<usize> {
        (0..self.vocab_size).map(|s| s % self.num_visemes).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(HarnessError::Config("vocab_size must be positive".into()));
        }
        if self.num_visemes == 0 || self.num_visemes > self.vocab_size {
            return Err(HarnessError::Config("num_visemes must be in 1..=vocab_size".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(HarnessError::Config("invalid utterance length range".into()));
        }
        let map = self.viseme_map();
        let mut counts = vec![0usize; self.num_visemes];
        for &v in &map {
            counts[v] += 1;
        }
        if !counts.iter().any(|&c| c >= 2) {
            return Err(HarnessError::Config(
                "viseme map must collapse at least two symbols onto one viseme".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(HarnessError::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn gen_split(
    cfg: &ToyTaskConfig,
    store: &ParamStore,
    model: &AvsrModel,
    split: &str,
    split_id: u64,
    size: usize,
) -> Result<Vec<Utterance>> {
    let map = cfg.viseme_map();
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, split_id, i as u64]));
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let visemes: Vec<usize> = tokens.iter().map(|&t| map[t]).collect();

        let mut audio = model.audio_enc.input_stream(store, &tokens)?;
        if cfg.audio_jitter > 0.0 {
            for v in audio.as_mut_slice() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.audio_jitter * n;
            }
        }
        let visual = model.visual_enc.input_stream(store, &visemes)?;
        out.push(Utterance {
            id: format!("{split}-{i:04}"),
            tokens,
            audio: FeatureSequence::new(audio, model.audio_enc.cfg.frame_rate_hz, Modality::Audio)?,
            visual: FeatureSequence::new(visual, model.visual_enc.cfg.frame_rate_hz, Modality::Visual)?,
        });
    }
    Ok(out)
}

/// Generate the three splits. Deterministic given the config seed.
pub fn gen_dataset(cfg: &ToyTaskConfig, store: &ParamStore, model: &AvsrModel) -> Result<Dataset> {
    cfg.validate()?;
    if model.cfg.symbols != cfg.vocab_size || model.cfg.visemes != cfg.num_visemes {
        return Err(HarnessError::Config(format!(
            "model built for {} symbols / {} visemes but task has {} / {}",
            model.cfg.symbols, model.cfg.visemes, cfg.vocab_size, cfg.num_visemes
        )));
    }
    Ok(Dataset {
        train: gen_split(cfg, store, model, "train", 1, cfg.train_size)?,
        dev: gen_split(cfg, store, model, "dev", 2, cfg.dev_size)?,
        test: gen_split(cfg, store, model, "test", 3, cfg.test_size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use avur_core::model::AvsrConfig;

    fn setup() -> (ParamStore, AvsrModel, ToyTaskConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let model = AvsrModel::new(&mut store, AvsrConfig::toy(20, 8), &mut rng).unwrap();
        let cfg = ToyTaskConfig { train_size: 30, dev_size: 5, test_size: 10, ..Default::default() };
        (store, model, cfg)
    }

    #[test]
    fn same_seed_gives_bitwise_identical_dataset() {
        let (store, model, cfg) = setup();
        let a = gen_dataset(&cfg, &store, &model).unwrap();
        let b = gen_dataset(&cfg, &store, &model).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.tokens, y.tokens);
            assert!(x.audio.frames.bits_eq(&y.audio.frames));
            assert!(x.visual.frames.bits_eq(&y.visual.frames));
        }
    }

    #[test]
    fn shared_viseme_symbols_collapse_to_identical_visual_streams() {
        let (store, model, cfg) = setup();
        let map = cfg.viseme_map();
        // symbols 0 and 8 share viseme 0 under the modulo map
        assert_eq!(map[0], map[8]);
        let va = model.visual_enc.input_stream(&store, &[map[0], map[3], map[0]]).unwrap();
        let tokens_a = [0usize, 3, 0];
        let tokens_b = [8usize, 3, 8];
        let stream_a = model
            .visual_enc
            .input_stream(&store, &tokens_a.iter().map(|&t| map[t]).collect::<Vec<_>>())
            .unwrap();
        let stream_b = model
            .visual_enc
            .input_stream(&store, &tokens_b.iter().map(|&t| map[t]).collect::<Vec<_>>())
            .unwrap();
        assert!(stream_a.bits_eq(&stream_b));
        assert!(stream_a.bits_eq(&va));
    }

    #[test]
    fn audio_stream_is_4x_visual_length() {
        let (store, model, cfg) = setup();
        let ds = gen_dataset(&cfg, &store, &model).unwrap();
        for u in ds.train.iter().take(5) {
            assert_eq!(u.audio.len(), 4 * u.visual.len());
            assert_eq!(u.visual.len(), u.tokens.len());
        }
    }

    #[test]
    fn symbol_marginals_are_uniform_within_3_sigma() {
        let (store, model, mut cfg) = setup();
        cfg.train_size = 0;
        cfg.dev_size = 0;
        cfg.test_size = 0;
        // draw tokens the same way gen_split does, 10^4 utterances
        let mut counts = vec![0usize; cfg.vocab_size];
        let mut total = 0usize;
        for i in 0..10_000usize {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1, i as u64]));
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            for _ in 0..len {
                counts[rng.random_range(0..cfg.vocab_size)] += 1;
                total += 1;
            }
        }
        let _ = (store, model);
        let p = 1.0 / cfg.vocab_size as f64;
        let expected = total as f64 * p;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (s, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expected).abs();
            assert!(
                dev <= 3.0 * sigma,
                "symbol {s}: count {c} deviates {dev:.1} > 3 sigma ({:.1})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn viseme_map_is_total_and_non_injective() {
        let cfg = ToyTaskConfig::default();
        cfg.validate().unwrap();
        let map = cfg.viseme_map();
        assert_eq!(map.len(), 20);
        assert!(map.iter().all(|&v| v < 8));
        let bad = ToyTaskConfig { vocab_size: 4, num_visemes: 4, ..Default::default() };
        assert!(bad.validate().is_err(), "injective viseme map must be rejected");
    }
}
