//! Frozen toy encoders standing in for the pretrained audio and visual
//! front ends, plus the resampler/projector that lifts visual features to
//! audio resolution.
//!
//! The audio encoder emits 4 frames per token and the visual encoder 1, so
//! the 4:1 rate mismatch the resampler has to bridge is always present.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{FeatureSequence, Modality};
use crate::numerics::{
    AttentionConfig, FfwParams, LayerNormParams, Matrix, MhaParams, NodeId, ParamId, ParamStore,
    Tape,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffw_hidden: usize,
    pub frames_per_token: usize,
    pub frame_rate_hz: f64,
    pub modality: Modality,
}

impl EncoderConfig {
    pub fn audio(vocab: usize, dim: usize) -> Self {
        EncoderConfig {
            vocab,
            dim,
            depth: 4,
            heads: 2,
            ffw_hidden: 2 * dim,
            frames_per_token: 4,
            frame_rate_hz: 100.0,
            modality: Modality::Audio,
        }
    }

    pub fn visual(vocab: usize, dim: usize) -> Self {
        EncoderConfig {
            vocab,
            dim,
            depth: 4,
            heads: 2,
            ffw_hidden: 2 * dim,
            frames_per_token: 1,
            frame_rate_hz: 25.0,
            modality: Modality::Visual,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attn: MhaParams,
    ln_ffw: LayerNormParams,
    ffw: FfwParams,
}

/// A small pre-norm transformer stack over an embedded token stream.
/// Constructed frozen; per-layer outputs are retained so downstream
/// consumers can tap any depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub cfg: EncoderConfig,
    emb: ParamId,
    layers: Vec<EncoderLayer>,
    prefix: String,
}

impl ToyEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.dim, cfg.heads)?;
        let emb = store.add_weight(&format!("{prefix}.emb"), cfg.vocab, cfg.dim, rng);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("{prefix}.layer{l}");
            layers.push(EncoderLayer {
                ln_attn: LayerNormParams::new(store, &format!("{p}.ln_attn"), cfg.dim),
                attn: MhaParams::new(store, &format!("{p}.attn"), attn_cfg, rng),
                ln_ffw: LayerNormParams::new(store, &format!("{p}.ln_ffw"), cfg.dim),
                ffw: FfwParams::new(store, &format!("{p}.ffw"), cfg.dim, cfg.ffw_hidden, rng),
            });
        }
        store.freeze_prefix(prefix);
        Ok(ToyEncoder { cfg, emb, layers, prefix: prefix.to_string() })
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn param_prefix(&self) -> &str {
        &self.prefix
    }

    /// Embed a token sequence into its raw input stream: each token becomes
    /// `frames_per_token` copies of its embedding row. No positions here;
    /// those are added inside the layer stack.
    pub fn input_stream(&self, store: &ParamStore, tokens: &[usize]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(CoreError::InvalidArg("input_stream: empty token sequence".into()));
        }
        let table = store.value(self.emb);
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(CoreError::UnknownToken { token: t, vocab: self.cfg.vocab });
            }
        }
        let fpt = self.cfg.frames_per_token;
        let mut out = Matrix::zeros(tokens.len() * fpt, self.cfg.dim);
        for (i, &t) in tokens.iter().enumerate() {
            for f in 0..fpt {
                out.row_mut(i * fpt + f).copy_from_slice(table.row(t));
            }
        }
        Ok(out)
    }

    /// Run the layer stack over a raw stream on the given tape, returning
    /// every layer's output in order (index 0 = layer 1).
    pub fn forward_stream(&self, store: &ParamStore, tape: &mut Tape, stream: NodeId) -> Vec<NodeId> {
        let t = tape.value(stream).rows();
        let pos = tape.constant(sinusoidal_positions(t, self.cfg.dim));
        let mut h = tape.add(stream, pos);
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.ln_attn.forward(tape, store, h);
            let a = layer.attn.forward(tape, store, n, n, n, None);
            h = tape.add(h, a);
            let n = layer.ln_ffw.forward(tape, store, h);
            let f = layer.ffw.forward(tape, store, n);
            h = tape.add(h, f);
            outs.push(h);
        }
        outs
    }

    /// Value-only stack over a raw stream; returns all layer outputs.
    pub fn forward_stream_values(&self, store: &ParamStore, stream: &Matrix) -> Vec<Matrix> {
        let mut tape = Tape::new();
        let s = tape.constant(stream.clone());
        let outs = self.forward_stream(store, &mut tape, s);
        outs.into_iter().map(|n| tape.value(n).clone()).collect()
    }

    /// Layer-ℓ activations for a token sequence plus an optional additive
    /// perturbation of the raw stream (1-based layer index).
    pub fn encode(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        noise: Option<&Matrix>,
        layer: usize,
    ) -> Result<FeatureSequence> {
        if layer < 1 || layer > self.cfg.depth {
            return Err(CoreError::InvalidArg(format!(
                "encode: layer {layer} out of 1..={}",
                self.cfg.depth
            )));
        }
        let mut stream = self.input_stream(store, tokens)?;
        if let Some(n) = noise {
            if !n.same_shape(&stream) {
                return Err(CoreError::ShapeMismatch(format!(
                    "encode: noise {}x{} vs stream {}x{}",
                    n.rows(),
                    n.cols(),
                    stream.rows(),
                    stream.cols()
                )));
            }
            stream.add_assign(n);
        }
        let outs = self.forward_stream_values(store, &stream);
        FeatureSequence::new(outs[layer - 1].clone(), self.cfg.frame_rate_hz, self.cfg.modality)
    }
}

/// Fixed sinusoidal position signal added to encoder inputs so frame order
/// survives the permutation-equivariant attention layers.
pub fn sinusoidal_positions(t: usize, d: usize) -> Matrix {
    Matrix::from_fn(t, d, |pos, i| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin() * 0.5
        } else {
            angle.cos() * 0.5
        }
    })
}

/// Linear time interpolation of a feature sequence to an exact target
/// length, endpoints aligned. Differentiable through the tape op; this is
/// the value-level entry point.
pub fn resample_to(x: &FeatureSequence, target_len: usize) -> Result<FeatureSequence> {
    if target_len < 1 {
        return Err(CoreError::InvalidArg("resample_to: target length must be >= 1".into()));
    }
    let mut tape = Tape::new();
    let n = tape.constant(x.frames.clone());
    let out = tape.resample_rows(n, target_len);
    let rate = x.frame_rate_hz * target_len as f64 / x.len() as f64;
    FeatureSequence::new(tape.value(out).clone(), rate, x.modality)
}

/// Per-frame affine map: frames * w + b.
pub fn project(x: &FeatureSequence, w: &Matrix, b: &Matrix) -> Result<FeatureSequence> {
    if w.rows() != x.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "project: weight rows {} != feature dim {}",
            w.rows(),
            x.dim()
        )));
    }
    if b.shape() != (1, w.cols()) {
        return Err(CoreError::ShapeMismatch("project: bias must be 1 x d_out".into()));
    }
    let mut out = x.frames.matmul(w);
    for t in 0..out.rows() {
        for (o, bv) in out.row_mut(t).iter_mut().zip(b.row(0)) {
            *o += bv;
        }
    }
    FeatureSequence::new(out, x.frame_rate_hz, x.modality)
}

/// The trainable visual front end: resample the visual stream to audio
/// resolution, then project it into the audio feature dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisualFrontend {
    pub w_v: ParamId,
    pub b_v: ParamId,
}

impl VisualFrontend {
    pub fn new(store: &mut ParamStore, prefix: &str, d_v: usize, d_a: usize, rng: &mut impl Rng) -> Self {
        VisualFrontend {
            w_v: store.add_weight(&format!("{prefix}.w_v"), d_v, d_a, rng),
            b_v: store.add_zeros(&format!("{prefix}.b_v"), 1, d_a),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xv: NodeId, t_a: usize) -> NodeId {
        let r = tape.resample_rows(xv, t_a);
        let w = tape.param(store, self.w_v);
        let b = tape.param(store, self.b_v);
        let p = tape.matmul(r, w);
        tape.add_row_broadcast(p, b)
    }
}
