//! Teacher-forced cross-entropy training over a parameter store, with a
//! prefix-based freeze contract: exactly the thawed components receive
//! updates, everything else stays bitwise untouched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::features::Utterance;
use crate::model::{AvsrModel, FusionMode};
use crate::numerics::{cosine_lr, AdamW, AdamWConfig, Matrix, ParamStore, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Abort when a step loss exceeds this multiple of the first step's loss.
    pub divergence_factor: f64,
    /// Cosine-anneal the learning rate down to lr * lr_floor_frac.
    pub cosine: bool,
    pub lr_floor_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            divergence_factor: 10.0,
            cosine: true,
            lr_floor_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    /// Mean batch loss per step, nats/token.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Trailing moving average over the given window at each step.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut sum = 0.0;
        for (i, l) in self.losses.iter().enumerate() {
            sum += l;
            if i >= w {
                sum -= self.losses[i - w];
            }
            out.push(sum / (i + 1).min(w) as f64);
        }
        out
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }
}

/// Core SGD loop. Assumes requires_grad flags are already configured; the
/// optimizer touches only trainable entries.
fn run_training(
    model: &AvsrModel,
    store: &mut ParamStore,
    data: &[Utterance],
    cfg: &TrainConfig,
    mut stream_fn: impl FnMut(usize, &Utterance) -> Matrix,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(CoreError::InvalidArg("training: empty dataset".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let base_lr = cfg.optimizer.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = f64::NAN;
    for step in 0..cfg.steps {
        if cfg.cosine {
            opt.set_lr(cosine_lr(base_lr, step, cfg.steps, cfg.lr_floor_frac));
        }
        store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == data.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            let utt = &data[order[cursor]];
            cursor += 1;
            let audio = stream_fn(step, utt);
            let visual = if model.cfg.fusion == FusionMode::AudioOnly {
                None
            } else {
                Some(&utt.visual.frames)
            };
            let mut tape = Tape::new();
            let loss = model.ce_loss_on_tape(store, &mut tape, &audio, visual, &utt.tokens)?;
            batch_loss += tape.value(loss).item();
            let scaled = tape.scale(loss, 1.0 / cfg.batch_size as f64);
            tape.backward(scaled)?;
            tape.export_grads(store);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(CoreError::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(batch_loss);
        // divergence guard: compare against the average of the first few
        // steps so single-batch variance cannot trip it
        const BASELINE_STEPS: usize = 20;
        if losses.len() == BASELINE_STEPS.min(cfg.steps) {
            initial = losses.iter().sum::<f64>() / losses.len() as f64;
        }
        if losses.len() > BASELINE_STEPS && batch_loss > cfg.divergence_factor * initial.max(1e-9) {
            return Err(CoreError::Diverged {
                step,
                loss: batch_loss,
                limit: cfg.divergence_factor * initial.max(1e-9),
            });
        }
        opt.step(store);
    }
    store.zero_grads();
    Ok(TrainLog { losses })
}

/// Train the listed parameter prefixes against teacher-forced CE.
///
/// `stream_fn(step, utt)` supplies the audio stream for each visit (the
/// harness injects noise there); the visual stream is always the clean one.
pub fn train_ce(
    model: &AvsrModel,
    store: &mut ParamStore,
    data: &[Utterance],
    trainable_prefixes: &[&str],
    cfg: &TrainConfig,
    stream_fn: impl FnMut(usize, &Utterance) -> Matrix,
) -> Result<TrainLog> {
    let n = store.set_trainable_prefixes(trainable_prefixes);
    if n == 0 {
        return Err(CoreError::InvalidArg(format!(
            "train_ce: no parameters match prefixes {trainable_prefixes:?}"
        )));
    }
    run_training(model, store, data, cfg, stream_fn)
}

/// Stage-1 training: the visual front end, the alignment stack (when the
/// arm uses it), and the fusion layers (when the arm uses them) learn;
/// encoders and the base decoder stay frozen.
pub fn train_stage1(
    model: &AvsrModel,
    store: &mut ParamStore,
    data: &[Utterance],
    cfg: &TrainConfig,
    freeze_probe: bool,
    stream_fn: impl FnMut(usize, &Utterance) -> Matrix,
) -> Result<TrainLog> {
    for prefix in [model.audio_enc.param_prefix(), model.visual_enc.param_prefix()] {
        for id in store.ids_with_prefix(prefix) {
            if store.get(id).requires_grad {
                return Err(CoreError::InvalidArg(
                    "train_stage1: encoders must be frozen".into(),
                ));
            }
        }
    }
    if model.cfg.fusion == FusionMode::AudioOnly {
        return Err(CoreError::InvalidArg(
            "train_stage1: the audio-only arm has no stage-1 trainables".into(),
        ));
    }
    let mut prefixes: Vec<&str> = vec!["vfront"];
    if model.cfg.use_sma {
        prefixes.push("sma");
    }
    if model.cfg.fusion == FusionMode::Gated {
        prefixes.push("amf");
    }
    let n = store.set_trainable_prefixes(&prefixes);
    if n == 0 {
        return Err(CoreError::InvalidArg("train_stage1: nothing to train".into()));
    }
    if freeze_probe {
        for i in 0..model.amf.len() {
            store.freeze_prefix(&format!("amf.layer{i}.probe"));
        }
    }
    run_training(model, store, data, cfg, stream_fn)
}
