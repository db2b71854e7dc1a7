//! The assembled recognizer: frozen toy encoders, the trainable visual
//! front end, optional alignment stack, the decoder with optional fusion
//! layers, and beam-search N-best decoding.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amf::AmfLayer;
use crate::decoder::{Decoder, DecoderConfig, FusionInputs};
use crate::encoders::{EncoderConfig, ToyEncoder, VisualFrontend};
use crate::error::{CoreError, Result};
use crate::nbest::{Hypothesis, NBestList};
use crate::numerics::{log_softmax_row, AttentionConfig, Matrix, NodeId, ParamStore, Tape};
use crate::sma::SmaStack;

/// How visual information reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// No visual pathway at all.
    AudioOnly,
    /// Refined visual frames appended to the acoustic memory for the base
    /// cross-attention (shallow fusion; no gated layers involved).
    ShallowConcat,
    /// Gated fusion layers inserted in front of each decoder layer.
    Gated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvsrConfig {
    /// Task symbols; decoder vocabulary adds BOS and EOS after these.
    pub symbols: usize,
    pub visemes: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub ffw_hidden: usize,
    pub max_len: usize,
    pub fusion: FusionMode,
    pub use_sma: bool,
    /// 1-based audio encoder layers hosting the alignment blocks; empty
    /// selects the top three.
    pub sma_insertion: Vec<usize>,
}

impl AvsrConfig {
    pub fn toy(symbols: usize, visemes: usize) -> Self {
        AvsrConfig {
            symbols,
            visemes,
            d_a: 16,
            d_v: 12,
            enc_depth: 4,
            enc_heads: 2,
            dec_depth: 2,
            dec_heads: 2,
            ffw_hidden: 32,
            max_len: 64,
            fusion: FusionMode::Gated,
            use_sma: true,
            sma_insertion: Vec::new(),
        }
    }

    pub fn dec_vocab(&self) -> usize {
        self.symbols + 2
    }

    pub fn bos(&self) -> usize {
        self.symbols
    }

    pub fn eos(&self) -> usize {
        self.symbols + 1
    }
}

/// Counters proving which code paths ran; ablation arms assert on them.
#[derive(Debug, Default)]
pub struct PathCounters {
    pub sma_blocks: AtomicU64,
    pub amf_layers: AtomicU64,
}

impl PathCounters {
    pub fn sma(&self) -> u64 {
        self.sma_blocks.load(Ordering::Relaxed)
    }

    pub fn amf(&self) -> u64 {
        self.amf_layers.load(Ordering::Relaxed)
    }
}

impl Clone for PathCounters {
    fn clone(&self) -> Self {
        PathCounters::default()
    }
}

/// Component handles plus the arm configuration. All components always
/// exist in the store so every arm shares one parameter layout; the config
/// decides which paths execute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvsrModel {
    pub cfg: AvsrConfig,
    pub audio_enc: ToyEncoder,
    pub visual_enc: ToyEncoder,
    pub vfront: VisualFrontend,
    pub sma: SmaStack,
    pub amf: Vec<AmfLayer>,
    pub decoder: Decoder,
    #[serde(skip, default)]
    pub counters: PathCounters,
}

/// Tape nodes produced by the encoding front half of a forward pass.
pub struct EncodedNodes {
    /// Memory consumed by the base cross-attention.
    pub memory: NodeId,
    /// Final-layer acoustic activations (the probe target).
    pub xa: NodeId,
    /// Refined visual features, present in gated mode.
    pub xv_hat: Option<NodeId>,
    pub audio_layers: Vec<NodeId>,
}

/// Value-level snapshot for decode loops.
#[derive(Debug, Clone)]
pub struct EncodedValues {
    pub memory: Matrix,
    pub xa: Matrix,
    pub xv_hat: Option<Matrix>,
}

#[derive(Debug, Clone, Copy)]
pub struct BeamOptions {
    pub beam_width: usize,
    pub n_best: usize,
    pub max_gen: usize,
}

impl AvsrModel {
    pub fn new(store: &mut ParamStore, cfg: AvsrConfig, rng: &mut impl Rng) -> Result<Self> {
        let audio_enc = ToyEncoder::new(
            store,
            "enc_a",
            EncoderConfig { depth: cfg.enc_depth, heads: cfg.enc_heads, ..EncoderConfig::audio(cfg.symbols, cfg.d_a) },
            rng,
        )?;
        let visual_enc = ToyEncoder::new(
            store,
            "enc_v",
            EncoderConfig { depth: cfg.enc_depth, heads: cfg.enc_heads, ..EncoderConfig::visual(cfg.visemes, cfg.d_v) },
            rng,
        )?;
        let vfront = VisualFrontend::new(store, "vfront", cfg.d_v, cfg.d_a, rng);
        let attn_cfg = AttentionConfig::new(cfg.d_a, cfg.dec_heads)?;
        let insertion = if cfg.sma_insertion.is_empty() {
            SmaStack::default_layers(cfg.enc_depth)
        } else {
            cfg.sma_insertion.clone()
        };
        let sma = SmaStack::new(store, "sma", attn_cfg, insertion, cfg.enc_depth, rng)?;
        let amf: Vec<AmfLayer> = (0..cfg.dec_depth)
            .map(|i| AmfLayer::new(store, &format!("amf.layer{i}"), attn_cfg, cfg.ffw_hidden, rng))
            .collect();
        let decoder = Decoder::new(
            store,
            "dec",
            DecoderConfig {
                vocab: cfg.dec_vocab(),
                dim: cfg.d_a,
                depth: cfg.dec_depth,
                heads: cfg.dec_heads,
                ffw_hidden: cfg.ffw_hidden,
                max_len: cfg.max_len,
            },
            rng,
        )?;
        Ok(AvsrModel {
            cfg,
            audio_enc,
            visual_enc,
            vfront,
            sma,
            amf,
            decoder,
            counters: PathCounters::default(),
        })
    }

    /// Same parameters viewed under a different arm configuration.
    pub fn with_arm(&self, fusion: FusionMode, use_sma: bool) -> AvsrModel {
        let mut m = self.clone();
        m.cfg.fusion = fusion;
        m.cfg.use_sma = use_sma;
        m
    }

    fn uses_visual(&self) -> bool {
        self.cfg.fusion != FusionMode::AudioOnly
    }

    /// Run encoders and the visual pathway on the tape.
    pub fn encode_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
    ) -> Result<EncodedNodes> {
        let a0 = tape.constant(audio_stream.clone());
        let audio_layers = self.audio_enc.forward_stream(store, tape, a0);
        let xa = *audio_layers.last().expect("encoder depth >= 1");
        let t_a = audio_stream.rows();

        let xv_hat = if self.uses_visual() {
            let vs = visual_stream.ok_or_else(|| {
                CoreError::InvalidArg("visual stream required by the configured fusion mode".into())
            })?;
            let v0 = tape.constant(vs.clone());
            let vis_layers = self.visual_enc.forward_stream(store, tape, v0);
            let xv = *vis_layers.last().expect("encoder depth >= 1");
            let projected = self.vfront.forward(tape, store, xv, t_a);
            let refined = if self.cfg.use_sma {
                let out = self.sma.align(tape, store, projected, &audio_layers)?;
                self.counters.sma_blocks.fetch_add(self.sma.blocks.len() as u64, Ordering::Relaxed);
                out
            } else {
                projected
            };
            Some(refined)
        } else {
            None
        };

        let memory = match self.cfg.fusion {
            FusionMode::AudioOnly | FusionMode::Gated => xa,
            FusionMode::ShallowConcat => {
                let xv = xv_hat.expect("shallow fusion requires the visual path");
                tape.concat_rows(&[xa, xv])
            }
        };
        Ok(EncodedNodes { memory, xa, xv_hat, audio_layers })
    }

    /// Logits over the whole prefix, fusing per the configured mode.
    pub fn logits_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        enc: &EncodedNodes,
        prefix: &[usize],
        trace: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let fusion = match self.cfg.fusion {
            FusionMode::Gated => {
                self.counters.amf_layers.fetch_add(self.amf.len() as u64, Ordering::Relaxed);
                Some(FusionInputs {
                    layers: &self.amf,
                    acoustic_memory: enc.xa,
                    xv_hat: enc.xv_hat.expect("gated fusion requires the visual path"),
                })
            }
            _ => None,
        };
        self.decoder.forward_logits(tape, store, prefix, enc.memory, fusion, trace)
    }

    /// Teacher-forced cross entropy for one utterance.
    pub fn ce_loss_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let enc = self.encode_on_tape(store, tape, audio_stream, visual_stream)?;
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(self.cfg.bos());
        prefix.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(self.cfg.eos());
        let logits = self.logits_on_tape(store, tape, &enc, &prefix, None)?;
        Ok(tape.cross_entropy_mean_rows(logits, &targets))
    }

    /// Value-level encoding snapshot for decode loops.
    pub fn encode_values(
        &self,
        store: &ParamStore,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
    ) -> Result<EncodedValues> {
        let mut tape = Tape::new();
        let enc = self.encode_on_tape(store, &mut tape, audio_stream, visual_stream)?;
        Ok(EncodedValues {
            memory: tape.value(enc.memory).clone(),
            xa: tape.value(enc.xa).clone(),
            xv_hat: enc.xv_hat.map(|n| tape.value(n).clone()),
        })
    }

    fn logits_for_prefix(
        &self,
        store: &ParamStore,
        enc: &EncodedValues,
        prefix: &[usize],
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let memory = tape.constant(enc.memory.clone());
        let xa = if enc.memory.rows() == enc.xa.rows() && matches!(self.cfg.fusion, FusionMode::AudioOnly | FusionMode::Gated)
        {
            memory
        } else {
            tape.constant(enc.xa.clone())
        };
        let xv_hat = enc.xv_hat.as_ref().map(|m| tape.constant(m.clone()));
        let nodes = EncodedNodes { memory, xa, xv_hat, audio_layers: Vec::new() };
        let logits = self.logits_on_tape(store, &mut tape, &nodes, prefix, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Distribution over the next token given a BOS-started prefix.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        enc: &EncodedValues,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        if prefix.first() != Some(&self.cfg.bos()) {
            return Err(CoreError::Decode("prefix must start with BOS".into()));
        }
        let logits = self.logits_for_prefix(store, enc, prefix)?;
        let last = logits.row(logits.rows() - 1);
        let logp = log_softmax_row(last);
        Ok(logp.into_iter().map(f64::exp).collect())
    }

    /// Shrinking-beam core: the live set holds `beam_width` slots and an
    /// expansion ending in EOS retires into the finished pool, permanently
    /// consuming its slot. Width one therefore reduces to greedy decoding,
    /// and an exhaustive width explores every terminated sequence of up to
    /// `max_gen` tokens. Dangling live beams are force-terminated and
    /// flagged. Returns hypotheses sorted by (s_infer desc, tokens lex).
    fn beam_core(
        &self,
        store: &ParamStore,
        enc: &EncodedValues,
        beam_width: usize,
        max_gen: usize,
    ) -> Result<Vec<Hypothesis>> {
        if max_gen + 1 > self.cfg.max_len {
            return Err(CoreError::Decode(format!(
                "max_gen {} does not fit the decoder context {}",
                max_gen, self.cfg.max_len
            )));
        }
        let bos = self.cfg.bos();
        let eos = self.cfg.eos();

        struct Live {
            tokens: Vec<usize>,
            sum: f64,
        }
        let mut live = vec![Live { tokens: Vec::new(), sum: 0.0 }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _step in 0..max_gen {
            if live.is_empty() || finished.len() >= beam_width {
                break;
            }
            let mut cands: Vec<(f64, Vec<usize>)> =
                Vec::with_capacity(live.len() * self.cfg.dec_vocab());
            for beam in &live {
                let mut prefix = Vec::with_capacity(beam.tokens.len() + 1);
                prefix.push(bos);
                prefix.extend_from_slice(&beam.tokens);
                let logits = self.logits_for_prefix(store, enc, &prefix)?;
                let logp = log_softmax_row(logits.row(logits.rows() - 1));
                for (tok, lp) in logp.iter().enumerate() {
                    let mut toks = beam.tokens.clone();
                    toks.push(tok);
                    cands.push((beam.sum + lp, toks));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite beam scores")
                    .then_with(|| a.1.cmp(&b.1))
            });
            let slots = beam_width - finished.len();
            live = Vec::new();
            for (sum, toks) in cands.into_iter().take(slots) {
                if *toks.last().expect("non-empty expansion") == eos {
                    let gen_count = toks.len();
                    let content = toks[..toks.len() - 1].to_vec();
                    finished.push(Hypothesis {
                        tokens: content,
                        s_infer: sum / gen_count as f64,
                        forced: false,
                    });
                } else {
                    live.push(Live { tokens: toks, sum });
                }
            }
        }
        for beam in live {
            let gen_count = beam.tokens.len().max(1);
            finished.push(Hypothesis {
                tokens: beam.tokens,
                s_infer: beam.sum / gen_count as f64,
                forced: true,
            });
        }

        finished.sort_by(|a, b| {
            b.s_infer
                .partial_cmp(&a.s_infer)
                .expect("finite scores")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        finished.dedup_by(|a, b| a.tokens == b.tokens);
        Ok(finished)
    }

    /// Length-normalized beam search producing an N-best list.
    pub fn beam_search(
        &self,
        store: &ParamStore,
        utt_id: &str,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
        opts: &BeamOptions,
    ) -> Result<NBestList> {
        if opts.n_best < 2 || opts.beam_width < opts.n_best {
            return Err(CoreError::InvalidArg(format!(
                "beam search requires B >= N >= 2, got B={} N={}",
                opts.beam_width, opts.n_best
            )));
        }
        let enc = self.encode_values(store, audio_stream, visual_stream)?;
        let mut hyps = self.beam_core(store, &enc, opts.beam_width, opts.max_gen)?;
        hyps.truncate(opts.n_best);
        NBestList::new(utt_id.to_string(), hyps)
    }

    /// Width-one beam degeneracy: plain greedy decoding.
    pub fn greedy_transcribe(
        &self,
        store: &ParamStore,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
        max_gen: usize,
    ) -> Result<Vec<usize>> {
        let enc = self.encode_values(store, audio_stream, visual_stream)?;
        let hyps = self.beam_core(store, &enc, 1, max_gen)?;
        Ok(hyps.into_iter().next().expect("width-1 beam yields a hypothesis").tokens)
    }

    /// Content tokens of the best hypothesis under the given beam options.
    pub fn transcribe(
        &self,
        store: &ParamStore,
        audio_stream: &Matrix,
        visual_stream: Option<&Matrix>,
        opts: &BeamOptions,
    ) -> Result<Vec<usize>> {
        let list = self.beam_search(store, "transcribe", audio_stream, visual_stream, opts)?;
        Ok(list.top1().tokens.clone())
    }
}
