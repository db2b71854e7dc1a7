//! Base transformer decoder: causal self-attention over the token prefix,
//! cross-attention into the acoustic memory, feed-forward, pre-norm
//! residuals. Fusion layers are inserted in front of each base layer by the
//! caller, so with no insertions (or zeroed gates) the base path is
//! untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amf::AmfLayer;
use crate::error::{CoreError, Result};
use crate::numerics::{
    causal_mask, AttentionConfig, FfwParams, LayerNormParams, LinearParams, MhaParams, NodeId,
    ParamStore, Tape,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffw_hidden: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecoderLayer {
    ln_self: LayerNormParams,
    self_attn: MhaParams,
    ln_cross: LayerNormParams,
    cross_attn: MhaParams,
    ln_ffw: LayerNormParams,
    ffw: FfwParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    emb: crate::numerics::ParamId,
    pos: crate::numerics::ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNormParams,
    out: LinearParams,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.dim, cfg.heads)?;
        let emb = store.add_weight(&format!("{prefix}.emb"), cfg.vocab, cfg.dim, rng);
        let pos = store.add_weight(&format!("{prefix}.pos"), cfg.max_len, cfg.dim, rng);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("{prefix}.layer{l}");
            layers.push(DecoderLayer {
                ln_self: LayerNormParams::new(store, &format!("{p}.ln_self"), cfg.dim),
                self_attn: MhaParams::new(store, &format!("{p}.self_attn"), attn_cfg, rng),
                ln_cross: LayerNormParams::new(store, &format!("{p}.ln_cross"), cfg.dim),
                cross_attn: MhaParams::new(store, &format!("{p}.cross_attn"), attn_cfg, rng),
                ln_ffw: LayerNormParams::new(store, &format!("{p}.ln_ffw"), cfg.dim),
                ffw: FfwParams::new(store, &format!("{p}.ffw"), cfg.dim, cfg.ffw_hidden, rng),
            });
        }
        let final_ln = LayerNormParams::new(store, &format!("{prefix}.final_ln"), cfg.dim);
        let out = LinearParams::new(store, &format!("{prefix}.out"), cfg.dim, cfg.vocab, rng);
        Ok(Decoder { cfg, emb, pos, layers, final_ln, out })
    }

    /// Logits over the vocabulary for every prefix position.
    ///
    /// `fusion` carries the inserted layers together with the refined visual
    /// features and the pure acoustic memory the probes watch; `memory` is
    /// what the base cross-attention consumes (the same acoustic memory, or
    /// an extended one in shallow-fusion mode).
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &[usize],
        memory: NodeId,
        fusion: Option<FusionInputs<'_>>,
        mut trace: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        if prefix.is_empty() {
            return Err(CoreError::Decode("decoder prefix must be non-empty".into()));
        }
        if prefix.len() > self.cfg.max_len {
            return Err(CoreError::Decode(format!(
                "prefix length {} exceeds max context {}",
                prefix.len(),
                self.cfg.max_len
            )));
        }
        for &t in prefix {
            if t >= self.cfg.vocab {
                return Err(CoreError::UnknownToken { token: t, vocab: self.cfg.vocab });
            }
        }
        if let Some(f) = &fusion {
            if f.layers.len() != self.layers.len() {
                return Err(CoreError::InvalidArg(format!(
                    "fusion: {} inserted layers for {} base layers",
                    f.layers.len(),
                    self.layers.len()
                )));
            }
        }

        let t = prefix.len();
        let emb = tape.param(store, self.emb);
        let pos = tape.param(store, self.pos);
        let tok = tape.gather_rows(emb, prefix);
        let pos = tape.slice_rows(pos, 0, t);
        let mut h = tape.add(tok, pos);
        let mask = causal_mask(t);

        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(f) = &fusion {
                let (next, s) = f.layers[i].forward(tape, store, h, f.acoustic_memory, f.xv_hat)?;
                h = next;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(s);
                }
            }
            let n = layer.ln_self.forward(tape, store, h);
            let a = layer.self_attn.forward(tape, store, n, n, n, Some(&mask));
            h = tape.add(h, a);
            let n = layer.ln_cross.forward(tape, store, h);
            let c = layer.cross_attn.forward(tape, store, n, memory, memory, None);
            h = tape.add(h, c);
            let n = layer.ln_ffw.forward(tape, store, h);
            let ff = layer.ffw.forward(tape, store, n);
            h = tape.add(h, ff);
        }
        let h = self.final_ln.forward(tape, store, h);
        Ok(self.out.forward(tape, store, h))
    }
}

/// Everything an inserted fusion layer consumes.
#[derive(Clone, Copy)]
pub struct FusionInputs<'a> {
    pub layers: &'a [AmfLayer],
    /// Pure acoustic memory the probes attend over.
    pub acoustic_memory: NodeId,
    /// SMA-refined visual features at audio resolution.
    pub xv_hat: NodeId,
}
