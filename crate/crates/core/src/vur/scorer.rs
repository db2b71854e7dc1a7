//! The candidate scorer: a small frozen causal transformer with low-rank
//! adapters on its attention projections, standing in for the adapted LLM.
//! Each candidate is scored independently, conditioned on the shared
//! visual-unit prefix, so candidate order cannot leak into the scores.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{
    causal_mask, AttentionConfig, FfwParams, LayerNormParams, LinearParams, Matrix, NodeId,
    ParamId, ParamStore, Tape, cosine_lr, AdamW,
};
use crate::train::{TrainConfig, TrainLog};
use crate::vur::units::VisualUnitSequence;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffw_hidden: usize,
    /// Candidate token vocabulary (task symbols); one separator row is
    /// appended internally.
    pub token_vocab: usize,
    /// Number of codebook labels the unit embedding covers.
    pub unit_labels: usize,
    /// Dimension of the averaged unit features entering the projection.
    pub unit_dim: usize,
    pub max_context: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl ScorerConfig {
    pub fn toy(token_vocab: usize, unit_labels: usize, unit_dim: usize) -> Self {
        ScorerConfig {
            dim: 16,
            heads: 2,
            depth: 2,
            ffw_hidden: 32,
            token_vocab,
            unit_labels,
            unit_dim,
            max_context: 96,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.05,
        }
    }
}

/// A frozen base projection with a trainable low-rank bypass:
/// y = x W + b + (alpha/r) (drop(x) A) B, with B zero-initialized so the
/// adapted layer starts exactly equal to the base layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraLinear {
    pub base_w: ParamId,
    pub base_b: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        base_prefix: &str,
        lora_prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        LoraLinear {
            base_w: store.add_weight(&format!("{base_prefix}.w"), d_in, d_out, rng),
            base_b: store.add_zeros(&format!("{base_prefix}.b"), 1, d_out),
            a: store.add_weight(&format!("{lora_prefix}.a"), d_in, rank, rng),
            b: store.add_zeros(&format!("{lora_prefix}.b"), rank, d_out),
            rank,
            scale: alpha / rank as f64,
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let w = tape.param(store, self.base_w);
        let bias = tape.param(store, self.base_b);
        let base = tape.matmul(x, w);
        let base = tape.add_row_broadcast(base, bias);

        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let x_in = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let (rows, cols) = tape.value(x).shape();
                let keep = 1.0 - self.dropout;
                let mask = Matrix::from_fn(rows, cols, |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.constant(mask);
                tape.hadamard(x, m)
            }
            _ => x,
        };
        let low = tape.matmul(x_in, a);
        let low = tape.matmul(low, b);
        let low = tape.scale(low, self.scale);
        tape.add(base, low)
    }
}

/// Multi-head self-attention whose four projections carry adapters.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoraAttention {
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    cfg: AttentionConfig,
}

impl LoraAttention {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mask: &Matrix,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let qp = self.q.forward(tape, store, x, rng.as_deref_mut());
        let kp = self.k.forward(tape, store, x, rng.as_deref_mut());
        let vp = self.v.forward(tape, store, x, rng.as_deref_mut());
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = tape.slice_cols(qp, h * hd, hd);
            let kh = tape.slice_cols(kp, h * hd, hd);
            let vh = tape.slice_cols(vp, h * hd, hd);
            let scores = tape.matmul_transb(qh, kh);
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.o.forward(tape, store, ctx, rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScorerLayer {
    ln_attn: LayerNormParams,
    attn: LoraAttention,
    ln_ffw: LayerNormParams,
    ffw: FfwParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitScorer {
    pub cfg: ScorerConfig,
    tok_emb: ParamId,
    unit_emb: ParamId,
    pos_emb: ParamId,
    unit_proj: LinearParams,
    layers: Vec<ScorerLayer>,
    final_ln: LayerNormParams,
    head: LinearParams,
}

/// Parameter prefixes that stay trainable during scorer adaptation.
pub const SCORER_TRAINABLE_PREFIXES: [&str; 3] = ["scorer.lora", "scorer.unit_proj", "scorer.head"];

impl UnitScorer {
    pub fn new(store: &mut ParamStore, cfg: ScorerConfig, rng: &mut impl Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.dim, cfg.heads)?;
        let tok_emb = store.add_weight("scorer.base.tok_emb", cfg.token_vocab + 1, cfg.dim, rng);
        let unit_emb = store.add_weight("scorer.base.unit_emb", cfg.unit_labels, cfg.dim, rng);
        let pos_emb = store.add_weight("scorer.base.pos_emb", cfg.max_context, cfg.dim, rng);
        let unit_proj = LinearParams::new(store, "scorer.unit_proj", cfg.unit_dim, cfg.dim, rng);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let base = format!("scorer.base.layer{l}");
            let lora = format!("scorer.lora.layer{l}");
            let attn = LoraAttention {
                q: LoraLinear::new(store, &format!("{base}.attn.q"), &format!("{lora}.attn.q"), cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng),
                k: LoraLinear::new(store, &format!("{base}.attn.k"), &format!("{lora}.attn.k"), cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng),
                v: LoraLinear::new(store, &format!("{base}.attn.v"), &format!("{lora}.attn.v"), cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng),
                o: LoraLinear::new(store, &format!("{base}.attn.o"), &format!("{lora}.attn.o"), cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng),
                cfg: attn_cfg,
            };
            layers.push(ScorerLayer {
                ln_attn: LayerNormParams::new(store, &format!("{base}.ln_attn"), cfg.dim),
                attn,
                ln_ffw: LayerNormParams::new(store, &format!("{base}.ln_ffw"), cfg.dim),
                ffw: FfwParams::new(store, &format!("{base}.ffw"), cfg.dim, cfg.ffw_hidden, rng),
            });
        }
        let final_ln = LayerNormParams::new(store, "scorer.base.final_ln", cfg.dim);
        let head = LinearParams::new(store, "scorer.head", cfg.dim, 1, rng);
        // the base is frozen from the start; adapters, projection, and head learn
        store.freeze_prefix("scorer.base");
        Ok(UnitScorer { cfg, tok_emb, unit_emb, pos_emb, unit_proj, layers, final_ln, head })
    }

    fn sep_index(&self) -> usize {
        self.cfg.token_vocab
    }

    /// Score one candidate conditioned on the unit prefix. Returns a 1x1 node.
    fn score_one(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        unit_features: NodeId,
        unit_labels: &[usize],
        candidate: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let m = unit_labels.len();
        let clen = candidate.len();
        let total = m + 1 + clen;
        if total > self.cfg.max_context {
            return Err(CoreError::Decode(format!(
                "scorer context overflow: {total} > {}",
                self.cfg.max_context
            )));
        }
        for &t in candidate {
            if t >= self.cfg.token_vocab {
                return Err(CoreError::UnknownToken { token: t, vocab: self.cfg.token_vocab });
            }
        }
        for &l in unit_labels {
            if l >= self.cfg.unit_labels {
                return Err(CoreError::UnknownToken { token: l, vocab: self.cfg.unit_labels });
            }
        }

        let unit_emb = tape.param(store, self.unit_emb);
        let tok_emb = tape.param(store, self.tok_emb);
        let labels_part = tape.gather_rows(unit_emb, unit_labels);
        let proj_part = self.unit_proj.forward(tape, store, unit_features);
        let units_repr = tape.add(labels_part, proj_part);

        let mut tail_ids = Vec::with_capacity(1 + clen);
        tail_ids.push(self.sep_index());
        tail_ids.extend_from_slice(candidate);
        let tail = tape.gather_rows(tok_emb, &tail_ids);

        let seq = tape.concat_rows(&[units_repr, tail]);
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice_rows(pos, 0, total);
        let mut h = tape.add(seq, pos);
        let mask = causal_mask(total);
        for layer in &self.layers {
            let n = layer.ln_attn.forward(tape, store, h);
            let a = layer.attn.forward(tape, store, n, &mask, rng.as_deref_mut());
            h = tape.add(h, a);
            let n = layer.ln_ffw.forward(tape, store, h);
            let f = layer.ffw.forward(tape, store, n);
            h = tape.add(h, f);
        }
        let h = self.final_ln.forward(tape, store, h);
        // pool over the separator and candidate positions
        let pooled = tape.slice_rows(h, m, 1 + clen);
        let pooled = tape.mean_rows(pooled);
        Ok(self.head.forward(tape, store, pooled))
    }

    /// Score every candidate on a shared tape (training path; dropout when
    /// an rng is supplied).
    pub fn score_candidates_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        units: &VisualUnitSequence,
        candidates: &[Vec<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<NodeId>> {
        if candidates.is_empty() {
            return Err(CoreError::InvalidArg("score_candidates: no candidates".into()));
        }
        if units.is_empty() {
            return Err(CoreError::InvalidArg("score_candidates: empty unit sequence".into()));
        }
        let feats = tape.constant(units.feature_matrix());
        let labels = units.labels();
        candidates
            .iter()
            .map(|c| self.score_one(tape, store, feats, &labels, c, rng.as_deref_mut()))
            .collect()
    }

    /// Deterministic value-level scores (no dropout).
    pub fn score_candidates(
        &self,
        store: &ParamStore,
        units: &VisualUnitSequence,
        candidates: &[Vec<usize>],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.score_candidates_on_tape(&mut tape, store, units, candidates, None)?;
        Ok(nodes.into_iter().map(|n| tape.value(n).item()).collect())
    }
}

/// One list-wise training example: the cached units, the candidate token
/// sequences, and the index of the oracle-closest candidate.
#[derive(Debug, Clone)]
pub struct RescoreExample {
    pub units: std::sync::Arc<VisualUnitSequence>,
    pub candidates: Vec<Vec<usize>>,
    pub i_gt: usize,
}

/// Adapt the scorer with the list-wise softmax objective. Only the LoRA
/// adapters, the unit projection, and the head are updated.
pub fn train_scorer(
    scorer: &UnitScorer,
    store: &mut ParamStore,
    examples: &[RescoreExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if examples.is_empty() {
        return Err(CoreError::InvalidArg("train_scorer: no examples".into()));
    }
    let n = store.set_trainable_prefixes(&SCORER_TRAINABLE_PREFIXES);
    if n == 0 {
        return Err(CoreError::InvalidArg("train_scorer: nothing trainable".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let base_lr = cfg.optimizer.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
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
            if cursor == examples.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let scores = scorer.score_candidates_on_tape(
                &mut tape,
                store,
                &ex.units,
                &ex.candidates,
                Some(&mut dropout_rng),
            )?;
            let loss = crate::vur::rescore::listwise_loss_on_tape(&mut tape, &scores, ex.i_gt)?;
            batch_loss += tape.value(loss).item();
            let scaled = tape.scale(loss, 1.0 / cfg.batch_size as f64);
            tape.backward(scaled)?;
            tape.export_grads(store);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(CoreError::NonFinite(format!("scorer loss at step {step}")));
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
