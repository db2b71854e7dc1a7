use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::tape::{layer_norm_kernel, softmax_rows_kernel, NodeId, Tape};
use crate::numerics::{Matrix, ParamId, ParamStore};

/// Shape contract for multi-head attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads < 1 {
            return Err(CoreError::InvalidArg("attention: num_heads must be >= 1".into()));
        }
        if model_dim % num_heads != 0 {
            return Err(CoreError::InvalidArg(format!(
                "attention: model_dim {model_dim} not divisible by num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig { model_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MhaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub cfg: AttentionConfig,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        MhaParams {
            wq: store.add_weight(&format!("{prefix}.wq"), d, d, rng),
            bq: store.add_zeros(&format!("{prefix}.bq"), 1, d),
            wk: store.add_weight(&format!("{prefix}.wk"), d, d, rng),
            bk: store.add_zeros(&format!("{prefix}.bk"), 1, d),
            wv: store.add_weight(&format!("{prefix}.wv"), d, d, rng),
            bv: store.add_zeros(&format!("{prefix}.bv"), 1, d),
            wo: store.add_weight(&format!("{prefix}.wo"), d, d, rng),
            bo: store.add_zeros(&format!("{prefix}.bo"), 1, d),
            cfg,
        }
    }

    /// Scaled dot-product attention per head (scale 1/sqrt(D/H)), heads
    /// concatenated and output-projected. `mask`, when given, is added to
    /// every head's score matrix before the softmax.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<&Matrix>,
    ) -> NodeId {
        let d = self.cfg.model_dim;
        let hd = self.cfg.head_dim();
        debug_assert_eq!(tape.value(q).cols(), d, "mha: query dim");
        debug_assert_eq!(tape.value(k).cols(), d, "mha: key dim");
        debug_assert_eq!(tape.value(v).cols(), d, "mha: value dim");
        debug_assert_eq!(tape.value(k).rows(), tape.value(v).rows(), "mha: key/value length");

        let wq = tape.param(store, self.wq);
        let bq = tape.param(store, self.bq);
        let wk = tape.param(store, self.wk);
        let bk = tape.param(store, self.bk);
        let wv = tape.param(store, self.wv);
        let bv = tape.param(store, self.bv);
        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);

        let qp = tape.matmul(q, wq);
        let qp = tape.add_row_broadcast(qp, bq);
        let kp = tape.matmul(k, wk);
        let kp = tape.add_row_broadcast(kp, bk);
        let vp = tape.matmul(v, wv);
        let vp = tape.add_row_broadcast(vp, bv);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = tape.slice_cols(qp, h * hd, hd);
            let kh = tape.slice_cols(kp, h * hd, hd);
            let vh = tape.slice_cols(vp, h * hd, hd);
            let scores = tape.matmul_transb(qh, kh);
            let scores = tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => tape.add_const(scores, m),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let out = tape.matmul(ctx, wo);
        tape.add_row_broadcast(out, bo)
    }
}

/// Per-row layer normalization with learnable gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(&format!("{prefix}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add_zeros(&format!("{prefix}.bias"), 1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        tape.layer_norm_rows(x, gain, bias, self.eps)
    }
}

/// Affine map applied per row: y = x W + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: store.add_weight(&format!("{prefix}.w"), d_in, d_out, rng),
            b: store.add_zeros(&format!("{prefix}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

/// Two-layer perceptron with tanh hidden activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfwParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfwParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FfwParams {
            lin1: LinearParams::new(store, &format!("{prefix}.lin1"), dim, hidden, rng),
            lin2: LinearParams::new(store, &format!("{prefix}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.lin1.forward(tape, store, x);
        let h = tape.tanh(h);
        self.lin2.forward(tape, store, h)
    }
}

/// Upper-triangular causal mask: position t may attend to positions <= t.
pub fn causal_mask(t: usize) -> Matrix {
    Matrix::from_fn(t, t, |r, c| if c > r { -1e30 } else { 0.0 })
}

/// Numerically stabilized row softmax over a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    m.ensure_finite("softmax_rows: input")?;
    Ok(softmax_rows_kernel(m))
}

/// Plain layer norm over a matrix with explicit gain/bias rows.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    if eps <= 0.0 {
        return Err(CoreError::InvalidArg("layer_norm: eps must be > 0".into()));
    }
    if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
        return Err(CoreError::ShapeMismatch(format!(
            "layer_norm: gain/bias must be 1x{}",
            x.cols()
        )));
    }
    Ok(layer_norm_kernel(x, gain, bias, eps))
}

/// Value-only multi-head attention over plain matrices, evaluated through
/// the same tape path used everywhere else.
pub fn mha(
    store: &ParamStore,
    params: &MhaParams,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    let d = params.cfg.model_dim;
    if q.cols() != d || k.cols() != d || v.cols() != d {
        return Err(CoreError::ShapeMismatch(format!(
            "mha: inputs must have {d} columns (got {} / {} / {})",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(CoreError::ShapeMismatch(format!(
            "mha: key rows {} != value rows {}",
            k.rows(),
            v.rows()
        )));
    }
    let mut tape = Tape::new();
    let qn = tape.constant(q.clone());
    let kn = tape.constant(k.clone());
    let vn = tape.constant(v.clone());
    let out = params.forward(&mut tape, store, qn, kn, vn, mask);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // softmax([1, 2, 3]) computed at 50-digit precision and rounded to
    // nearest f64 ahead of time.
    const SM123: [f64; 3] = [
        0.09003057317038046,
        0.24472847105479764,
        0.6652409557748219,
    ];

    #[test]
    fn softmax_symmetric_pair() {
        let out = softmax_rows(&Matrix::row_vector(&[0.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        let out = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap();
        for (o, e) in out.as_slice().iter().zip(SM123) {
            assert!((o - e).abs() <= 1e-15, "got {o}, want {e}");
        }
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c: f64 = rng.random_range(-40.0..40.0);
            let base = Matrix::from_fn(3, 5, |_, _| rng.random_range(-5.0..5.0));
            let shifted = base.map(|v| v + c);
            let a = softmax_rows(&base).unwrap();
            let b = softmax_rows(&shifted).unwrap();
            assert!(a.sub(&b).max_abs() < 1e-12, "shift invariance violated");
            for t in 0..a.rows() {
                let s: f64 = a.row(t).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!(a.row(t).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(&Matrix::row_vector(&[1.0, f64::NAN]));
        assert!(err.is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let x = Matrix::from_vec(1, 4, vec![3.5; 4]);
        let gain = Matrix::filled(1, 4, 1.0);
        let bias = Matrix::zeros(1, 4);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert_eq!(y.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Matrix::from_vec(1, 2, vec![1.0, 3.0]);
        let gain = Matrix::filled(1, 2, 1.0);
        let bias = Matrix::zeros(1, 2);
        let y = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-5);
        assert!((y[(0, 1)] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_high_precision_values() {
        // 4x8 integer input, gain/bias chosen exactly representable; the
        // expected rows were evaluated at 50-digit precision with
        // eps = nearest-f64(1e-5) and rounded once to f64.
        let x = Matrix::from_rows(&[
            vec![1., 2., 3., 4., 5., 6., 7., 8.],
            vec![-3., 0., 2., 5., -1., 4., -2., 7.],
            vec![10., -10., 5., -5., 2., -2., 1., -1.],
            vec![0., 1., 0., -1., 2., -2., 3., -3.],
        ]);
        let gain = Matrix::row_vector(&[0.5, 1.0, 1.5, 2.0, 0.25, 0.75, 1.25, 1.75]);
        let bias = Matrix::row_vector(&[0.125, -0.125, 0.25, -0.25, 0.0, 0.5, -0.5, 1.0]);
        let expected = [
            [
                -0.638761888434045,
                -1.2160884120486357,
                -0.7319795708437722,
                -0.6864353648194543,
                0.054554420602431784,
                0.9909897854218861,
                0.8638605150607946,
                3.6731666095191575,
            ],
            [
                -0.5458200951077387,
                -0.5722133967384925,
                0.47360669836924624,
                1.836995851446298,
                -0.1863389153077052,
                1.0590167459231155,
                -1.8043724071539362,
                3.86961929573866,
            ],
            [
                1.0020578843750574,
                -1.8791157687501148,
                1.565586826562586,
                -2.0041157687501148,
                0.08770578843750573,
                0.23688263468748277,
                -0.28073552890623565,
                0.6930297404687299,
            ],
            [
                0.125,
                0.40952172022293676,
                0.25,
                -1.3190434404458735,
                0.2672608601114684,
                -0.3017825803344051,
                1.5044564508360128,
                -1.806239031170418,
            ],
        ];
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for t in 0..4 {
            for c in 0..8 {
                assert!(
                    (y[(t, c)] - expected[t][c]).abs() <= 1e-10,
                    "row {t} col {c}: got {}, want {}",
                    y[(t, c)],
                    expected[t][c]
                );
            }
        }
    }

    fn identity_mha(store: &mut ParamStore, d: usize, heads: usize) -> MhaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttentionConfig::new(d, heads).unwrap();
        let p = MhaParams::new(store, "t", cfg, &mut rng);
        let eye = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        for w in [p.wq, p.wk, p.wv, p.wo] {
            store.get_mut(w).value = eye.clone();
        }
        p
    }

    #[test]
    fn single_key_attention_copies_value() {
        let mut store = ParamStore::new();
        let p = identity_mha(&mut store, 4, 1);
        let q = Matrix::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1);
        let k = Matrix::row_vector(&[1.0, 0.0, -1.0, 0.5]);
        let v = Matrix::row_vector(&[2.0, -3.0, 0.25, 7.0]);
        let out = mha(&store, &p, &q, &k, &v, None).unwrap();
        for t in 0..3 {
            assert_eq!(out.row(t), v.row(0), "one-key attention must copy the value row");
        }
    }

    /// Naive per-element attention used as the brute-force oracle.
    fn naive_single_head(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Matrix {
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for t in 0..q.rows() {
            let mut scores = vec![0.0; k.rows()];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..q.cols() {
                    acc += q[(t, c)] * k[(j, c)];
                }
                *s = acc * scale;
            }
            let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxv).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in 0..v.cols() {
                    out[(t, c)] += e / z * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn single_head_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let p = identity_mha(&mut store, 4, 1);
        let q = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64).sin());
        let k = Matrix::from_fn(3, 4, |r, c| ((r + 2 * c) as f64).cos());
        let v = Matrix::from_fn(3, 4, |r, c| (r as f64) - (c as f64) * 0.5);
        let got = mha(&store, &p, &q, &k, &v, None).unwrap();
        let want = naive_single_head(&q, &k, &v, 0.5);
        assert!(got.sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn joint_kv_permutation_is_invariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(6, 2).unwrap();
        let p = MhaParams::new(&mut store, "p", cfg, &mut rng);
        let q = Matrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let k = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let v = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let perm = [2usize, 0, 3, 1];
        let kp = Matrix::from_fn(4, 6, |r, c| k[(perm[r], c)]);
        let vp = Matrix::from_fn(4, 6, |r, c| v[(perm[r], c)]);
        let a = mha(&store, &p, &q, &k, &v, None).unwrap();
        let b = mha(&store, &p, &q, &kp, &vp, None).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-12);
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for draw in 0..100 {
            let h = if draw % 2 == 0 { 1 } else { 2 };
            let d = 2 * h * rng.random_range(1..=2usize);
            let tq = rng.random_range(1..=8usize);
            let tk = rng.random_range(1..=8usize);
            let mut store = ParamStore::new();
            let cfg = AttentionConfig::new(d, h).unwrap();
            let p = MhaParams::new(&mut store, "p", cfg, &mut rng);
            for b in [p.bq, p.bk, p.bv, p.bo] {
                store.get_mut(b).value =
                    Matrix::from_fn(1, d, |_, _| rng.random_range(-0.2..0.2));
            }
            let q = Matrix::from_fn(tq, d, |_, _| rng.random_range(-1.5..1.5));
            let k = Matrix::from_fn(tk, d, |_, _| rng.random_range(-1.5..1.5));
            let v = Matrix::from_fn(tk, d, |_, _| rng.random_range(-1.5..1.5));
            let got = mha(&store, &p, &q, &k, &v, None).unwrap();

            // oracle: project, per-head naive attention, concat, project out
            let affine = |x: &Matrix, w: ParamId, b: ParamId| {
                let mut y = x.matmul(store.value(w));
                for t in 0..y.rows() {
                    let bias = store.value(b).row(0).to_vec();
                    for (o, bb) in y.row_mut(t).iter_mut().zip(bias) {
                        *o += bb;
                    }
                }
                y
            };
            let qp = affine(&q, p.wq, p.bq);
            let kp = affine(&k, p.wk, p.bk);
            let vp = affine(&v, p.wv, p.bv);
            let hd = d / h;
            let mut ctx = Matrix::zeros(tq, d);
            for head in 0..h {
                let sl = |m: &Matrix| Matrix::from_fn(m.rows(), hd, |r, c| m[(r, head * hd + c)]);
                let part = naive_single_head(&sl(&qp), &sl(&kp), &sl(&vp), 1.0 / (hd as f64).sqrt());
                for t in 0..tq {
                    for c in 0..hd {
                        ctx[(t, head * hd + c)] = part[(t, c)];
                    }
                }
            }
            let want = affine(&ctx, p.wo, p.bo);
            assert!(
                got.sub(&want).max_abs() < 1e-10,
                "draw {draw}: mha disagrees with naive oracle"
            );
        }
    }
}
