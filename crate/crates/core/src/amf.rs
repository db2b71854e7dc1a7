//! Adaptive modulated fusion: a forward-only probe attention measures how
//! concentrated the decoder's acoustic focus is, the normalized entropy of
//! each probe row becomes a per-token uncertainty, and sigmoid amplitude
//! gates combined with tanh direction gates modulate how much refined
//! visual context is injected into the residual stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{
    row_entropy_kernel, sigmoid, softmax_rows, AttentionConfig, FfwParams, LayerNormParams, Matrix,
    MhaParams, NodeId, ParamId, ParamStore, Tape,
};

/// One inserted fusion layer. Direction gates start at zero, so a freshly
/// inserted layer is an exact identity on the decoder state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmfLayer {
    pub probe_wq: ParamId,
    pub probe_wk: ParamId,
    pub gate_slope: ParamId,
    pub gate_offset: ParamId,
    pub dir_att: ParamId,
    pub dir_ff: ParamId,
    pub ln_attn: LayerNormParams,
    pub visual_xattn: MhaParams,
    pub ln_ffw: LayerNormParams,
    pub ffw: FfwParams,
    dim: usize,
}

impl AmfLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        ffw_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.model_dim;
        AmfLayer {
            probe_wq: store.add_weight(&format!("{prefix}.probe.wq"), d, d, rng),
            probe_wk: store.add_weight(&format!("{prefix}.probe.wk"), d, d, rng),
            gate_slope: store.add_scalar(&format!("{prefix}.gate_slope"), 1.0),
            gate_offset: store.add_scalar(&format!("{prefix}.gate_offset"), 0.0),
            dir_att: store.add_scalar(&format!("{prefix}.dir_att"), 0.0),
            dir_ff: store.add_scalar(&format!("{prefix}.dir_ff"), 0.0),
            ln_attn: LayerNormParams::new(store, &format!("{prefix}.ln_attn"), d),
            visual_xattn: MhaParams::new(store, &format!("{prefix}.visual_xattn"), cfg, rng),
            ln_ffw: LayerNormParams::new(store, &format!("{prefix}.ln_ffw"), d),
            ffw: FfwParams::new(store, &format!("{prefix}.ffw"), d, ffw_hidden, rng),
            dim: d,
        }
    }

    /// Single-head probe over audio frames, scale 1/sqrt(D), with gradient
    /// stopped through both the queries and the audio features. The
    /// projections themselves stay trainable unless frozen in the store.
    pub fn probe(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, xa: NodeId) -> Result<NodeId> {
        if tape.value(xa).rows() < 1 {
            return Err(CoreError::InvalidArg("probe: audio memory must be non-empty".into()));
        }
        let d = self.dim as f64;
        let q_sg = tape.stop_grad(x);
        let xa_sg = tape.stop_grad(xa);
        let wq = tape.param(store, self.probe_wq);
        let wk = tape.param(store, self.probe_wk);
        let qp = tape.matmul(q_sg, wq);
        let kp = tape.matmul(xa_sg, wk);
        let scores = tape.matmul_transb(qp, kp);
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        Ok(tape.softmax_rows(scores))
    }

    /// Apply the fusion layer. Returns the updated state and the per-token
    /// uncertainty column for instrumentation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        xa: NodeId,
        xv_hat: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if tape.value(x).cols() != self.dim || tape.value(xv_hat).cols() != self.dim {
            return Err(CoreError::ShapeMismatch(format!(
                "amf_layer: state and visual features must have dim {}",
                self.dim
            )));
        }
        let attn = self.probe(tape, store, x, xa)?;
        let s = tape.row_entropy_norm(attn);
        let slope = tape.param(store, self.gate_slope);
        let offset = tape.param(store, self.gate_offset);
        let pre = tape.scale_by_scalar(s, slope);
        let pre = tape.add_scalar_broadcast(pre, offset);
        let g_amp = tape.sigmoid(pre);

        let q = self.ln_attn.forward(tape, store, x);
        let ctx = self.visual_xattn.forward(tape, store, q, xv_hat, xv_hat, None);
        let dir_att = tape.param(store, self.dir_att);
        let dir_att = tape.tanh(dir_att);
        let g_att = tape.scale_by_scalar(g_amp, dir_att);
        let injected = tape.mul_col_broadcast(ctx, g_att);
        let x_mid = tape.add(x, injected);

        let f_in = self.ln_ffw.forward(tape, store, x_mid);
        let f = self.ffw.forward(tape, store, f_in);
        let dir_ff = tape.param(store, self.dir_ff);
        let dir_ff = tape.tanh(dir_ff);
        let g_ff = tape.scale_by_scalar(g_amp, dir_ff);
        let f_injected = tape.mul_col_broadcast(f, g_ff);
        Ok((tape.add(x_mid, f_injected), s))
    }
}

/// Value-level probe attention: softmax((Q Wq)(Xa Wk)^T / sqrt(D)).
pub fn probe_attention(q: &Matrix, xa: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    if xa.rows() < 1 {
        return Err(CoreError::InvalidArg("probe_attention: empty audio memory".into()));
    }
    if q.cols() != wq.rows() || xa.cols() != wk.rows() || wq.cols() != wk.cols() {
        return Err(CoreError::ShapeMismatch("probe_attention: projection dims".into()));
    }
    let d = wq.cols() as f64;
    let scores = q.matmul(wq).matmul_transb(&xa.matmul(wk)).scale(1.0 / d.sqrt());
    softmax_rows(&scores)
}

/// Entropy of an attention row normalized to [0, 1] by ln(T). A single
/// frame is fully concentrated by construction, so T = 1 yields 0.
pub fn uncertainty(a_row: &[f64]) -> f64 {
    if a_row.len() < 2 {
        return 0.0;
    }
    row_entropy_kernel(&Matrix::row_vector(a_row)).item()
}

/// Amplitude of visual injection: sigmoid(a * s + b), strictly inside (0, 1).
pub fn amplitude_gate(s: f64, a: f64, b: f64) -> f64 {
    sigmoid(a * s + b)
}
