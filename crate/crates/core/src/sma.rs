//! Sparse modality alignment: lightweight blocks that refine projected
//! visual features against upper-layer audio activations. Audio enters
//! each block only as stop-gradded keys/values, and a zero-initialized
//! tanh output gate makes every block an exact identity at step 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{AttentionConfig, MhaParams, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentBlock {
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub out_gate: ParamId,
    pub cfg: AttentionConfig,
}

impl AlignmentBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        AlignmentBlock {
            self_attn: MhaParams::new(store, &format!("{prefix}.self_attn"), cfg, rng),
            cross_attn: MhaParams::new(store, &format!("{prefix}.cross_attn"), cfg, rng),
            out_gate: store.add_scalar(&format!("{prefix}.out_gate"), 0.0),
            cfg,
        }
    }

    /// xv + tanh(out_gate) * MHA(MHA(xv, xv, xv), sg(xa), sg(xa)).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xv: NodeId, xa: NodeId) -> Result<NodeId> {
        let (tv, dv) = tape.value(xv).shape();
        let (ta, da) = tape.value(xa).shape();
        if tv != ta || dv != da {
            return Err(CoreError::ShapeMismatch(format!(
                "align_block: visual {tv}x{dv} vs audio {ta}x{da}; alignment requires a shared time base"
            )));
        }
        let xa_sg = tape.stop_grad(xa);
        let self_attended = self.self_attn.forward(tape, store, xv, xv, xv, None);
        let cross = self.cross_attn.forward(tape, store, self_attended, xa_sg, xa_sg, None);
        let gate = tape.param(store, self.out_gate);
        let gate = tape.tanh(gate);
        let gated = tape.scale_by_scalar(cross, gate);
        Ok(tape.add(xv, gated))
    }
}

/// The inserted stack: exactly three blocks, each tied to an upper audio
/// encoder layer whose activation it consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmaStack {
    pub blocks: Vec<AlignmentBlock>,
    pub insertion_layers: Vec<usize>,
    /// When false, every block consumes the final layer's activation
    /// instead of its own insertion layer's.
    pub per_layer_audio: bool,
}

pub const SMA_BLOCK_COUNT: usize = 3;

impl SmaStack {
    /// `insertion_layers` are 1-based audio encoder layer indices; they must
    /// be strictly increasing and lie in the upper half of the stack.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        insertion_layers: Vec<usize>,
        encoder_depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if insertion_layers.len() != SMA_BLOCK_COUNT {
            return Err(CoreError::InvalidArg(format!(
                "sma: expected {SMA_BLOCK_COUNT} insertion layers, got {}",
                insertion_layers.len()
            )));
        }
        let lower = encoder_depth / 2; // upper half, inclusive boundary
        for pair in insertion_layers.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CoreError::InvalidArg("sma: insertion layers must strictly increase".into()));
            }
        }
        for &l in &insertion_layers {
            if l < lower.max(1) || l > encoder_depth {
                return Err(CoreError::InvalidArg(format!(
                    "sma: insertion layer {l} outside upper half ({}..={encoder_depth})",
                    lower.max(1)
                )));
            }
        }
        let blocks = (0..SMA_BLOCK_COUNT)
            .map(|i| AlignmentBlock::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect();
        Ok(SmaStack { blocks, insertion_layers, per_layer_audio: true })
    }

    /// Default placement: the top three layers of the encoder.
    pub fn default_layers(encoder_depth: usize) -> Vec<usize> {
        (encoder_depth - SMA_BLOCK_COUNT + 1..=encoder_depth).collect()
    }

    /// Apply the blocks in order. `audio_layers[l-1]` must hold the layer-l
    /// activation node for every insertion layer l.
    pub fn align(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xv_projected: NodeId,
        audio_layers: &[NodeId],
    ) -> Result<NodeId> {
        let mut x = xv_projected;
        for (block, &layer) in self.blocks.iter().zip(&self.insertion_layers) {
            if layer < 1 || layer > audio_layers.len() {
                return Err(CoreError::InvalidArg(format!(
                    "sma: missing audio activation for insertion layer {layer}"
                )));
            }
            let xa = if self.per_layer_audio {
                audio_layers[layer - 1]
            } else {
                *audio_layers.last().expect("non-empty audio layers")
            };
            x = block.forward(tape, store, x, xa)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, d: usize) -> (ParamStore, AlignmentBlock, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(d, 2).unwrap();
        let block = AlignmentBlock::new(&mut store, "sma.block0", cfg, &mut rng);
        (store, block, rng)
    }

    #[test]
    fn zero_gate_is_exact_identity() {
        let (store, block, mut rng) = setup(1, 4);
        let xv = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xvn = tape.constant(xv.clone());
        let xan = tape.constant(xa);
        let out = block.forward(&mut tape, &store, xvn, xan).unwrap();
        assert!(tape.value(out).sub(&xv).max_abs() == 0.0);
    }

    #[test]
    fn rejects_length_mismatch() {
        let (store, block, mut rng) = setup(2, 4);
        let xv = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xvn = tape.constant(xv);
        let xan = tape.constant(xa);
        assert!(block.forward(&mut tape, &store, xvn, xan).is_err());
    }

    #[test]
    fn audio_gradient_is_bitwise_zero_through_block() {
        let (mut store, block, mut rng) = setup(3, 4);
        // open the gate so the cross-attention branch is live
        store.get_mut(block.out_gate).value = Matrix::scalar(0.8);
        let xv = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xvn = tape.leaf(xv, true);
        let xan = tape.leaf(xa, true); // pretend the audio path is trainable
        let out = block.forward(&mut tape, &store, xvn, xan).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert!(tape.grad(xan).is_none(), "audio input must receive zero gradient");
        assert!(tape.grad(xvn).is_some(), "visual input must receive gradient");
    }

    /// Brute-force evaluation of one block at the value level.
    fn oracle_block(store: &ParamStore, block: &AlignmentBlock, xv: &Matrix, xa: &Matrix) -> Matrix {
        let sa = crate::numerics::mha(store, &block.self_attn, xv, xv, xv, None).unwrap();
        let cross = crate::numerics::mha(store, &block.cross_attn, &sa, xa, xa, None).unwrap();
        let g = store.value(block.out_gate).item().tanh();
        xv.add(&cross.scale(g))
    }

    #[test]
    fn near_unit_gate_matches_loop_oracle() {
        let (mut store, block, mut rng) = setup(4, 4);
        let eps = 1e-6f64;
        store.get_mut(block.out_gate).value = Matrix::scalar((1.0 - eps).atanh());
        let xv = Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xvn = tape.constant(xv.clone());
        let xan = tape.constant(xa.clone());
        let out = block.forward(&mut tape, &store, xvn, xan).unwrap();
        let want = oracle_block(&store, &block, &xv, &xa);
        assert!(tape.value(out).sub(&want).max_abs() < 1e-12);
    }

    fn stack_setup(seed: u64) -> (ParamStore, SmaStack, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let stack = SmaStack::new(&mut store, "sma", cfg, vec![2, 3, 4], 4, &mut rng).unwrap();
        (store, stack, rng)
    }

    #[test]
    fn stack_identity_with_all_gates_zero() {
        let (store, stack, mut rng) = stack_setup(5);
        let xv = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xvn = tape.constant(xv.clone());
        let layers: Vec<_> = (0..4)
            .map(|_| {
                let m = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
                tape.constant(m)
            })
            .collect();
        let out = stack.align(&mut tape, &store, xvn, &layers).unwrap();
        assert!(tape.value(out).sub(&xv).max_abs() == 0.0);
    }

    #[test]
    fn three_block_stack_matches_sequential_oracle() {
        let (mut store, stack, mut rng) = stack_setup(6);
        for (i, b) in stack.blocks.iter().enumerate() {
            store.get_mut(b.out_gate).value = Matrix::scalar(0.3 + 0.2 * i as f64);
        }
        let xv = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let audio: Vec<Matrix> =
            (0..4).map(|_| Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0))).collect();

        let mut tape = Tape::new();
        let xvn = tape.constant(xv.clone());
        let layer_nodes: Vec<_> = audio.iter().map(|m| tape.constant(m.clone())).collect();
        let got = stack.align(&mut tape, &store, xvn, &layer_nodes).unwrap();

        let mut want = xv;
        for (block, &layer) in stack.blocks.iter().zip(&stack.insertion_layers) {
            want = oracle_block(&store, block, &want, &audio[layer - 1]);
        }
        assert!(tape.value(got).sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn missing_layer_output_is_an_error() {
        let (store, stack, mut rng) = stack_setup(7);
        let mut tape = Tape::new();
        let xvn = tape.constant(Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0)));
        let only_two: Vec<_> = (0..2)
            .map(|_| tape.constant(Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0))))
            .collect();
        assert!(stack.align(&mut tape, &store, xvn, &only_two).is_err());
    }

    #[test]
    fn validates_insertion_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(8, 2).unwrap();
        assert!(SmaStack::new(&mut store, "a", cfg, vec![2, 2, 3], 4, &mut rng).is_err());
        assert!(SmaStack::new(&mut store, "b", cfg, vec![1, 2, 3], 4, &mut rng).is_err());
        assert!(SmaStack::new(&mut store, "c", cfg, vec![2, 3], 4, &mut rng).is_err());
        assert_eq!(SmaStack::default_layers(4), vec![2, 3, 4]);
    }

    #[test]
    fn single_block_stack_composition_base_case() {
        let (mut store, stack, mut rng) = stack_setup(9);
        // zero out blocks 1 and 2; block 0 live
        store.get_mut(stack.blocks[0].out_gate).value = Matrix::scalar(0.5);
        let xv = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let audio: Vec<Matrix> =
            (0..4).map(|_| Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0))).collect();
        let mut tape = Tape::new();
        let xvn = tape.constant(xv.clone());
        let nodes: Vec<_> = audio.iter().map(|m| tape.constant(m.clone())).collect();
        let got = stack.align(&mut tape, &store, xvn, &nodes).unwrap();
        let want = oracle_block(&store, &stack.blocks[0], &xv, &audio[1]);
        assert!(tape.value(got).sub(&want).max_abs() < 1e-12);
    }
}
