//! Cross-module contracts: inserted blocks are exact identities at zero
//! gate, stop-gradient edges are bitwise dead, frozen components never
//! move, and beam search degenerates correctly at both width extremes.

use avur_core::features::{FeatureSequence, Modality, Utterance};
use avur_core::model::{AvsrConfig, AvsrModel, BeamOptions, FusionMode};
use avur_core::numerics::{Matrix, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(seed: u64, fusion: FusionMode, use_sma: bool) -> (ParamStore, AvsrModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = AvsrConfig::toy(6, 4);
    cfg.fusion = fusion;
    cfg.use_sma = use_sma;
    let model = AvsrModel::new(&mut store, cfg, &mut rng).unwrap();
    (store, model)
}

fn streams(store: &ParamStore, model: &AvsrModel, tokens: &[usize]) -> (Matrix, Matrix) {
    let audio = model.audio_enc.input_stream(store, tokens).unwrap();
    let visemes: Vec<usize> = tokens.iter().map(|t| t % model.cfg.visemes).collect();
    let visual = model.visual_enc.input_stream(store, &visemes).unwrap();
    (audio, visual)
}

#[test]
fn zero_init_gates_give_bitwise_identical_logits() {
    let (store, model) = build(11, FusionMode::Gated, true);
    let audio_only = model.with_arm(FusionMode::AudioOnly, false);
    let tokens = [0usize, 3, 1, 5];
    let (audio, visual) = streams(&store, &model, &tokens);

    let prefix = [model.cfg.bos(), 0, 3, 1, 5];
    let mut t1 = Tape::new();
    let enc1 = model.encode_on_tape(&store, &mut t1, &audio, Some(&visual)).unwrap();
    let gated = model.logits_on_tape(&store, &mut t1, &enc1, &prefix, None).unwrap();

    let mut t2 = Tape::new();
    let enc2 = audio_only.encode_on_tape(&store, &mut t2, &audio, None).unwrap();
    let plain = audio_only.logits_on_tape(&store, &mut t2, &enc2, &prefix, None).unwrap();

    assert!(
        t1.value(gated).bits_eq(t2.value(plain)),
        "zero-gated fusion must not perturb the base decoder bitwise"
    );
}

#[test]
fn opening_gates_changes_logits() {
    let (mut store, model) = build(11, FusionMode::Gated, true);
    for layer in &model.amf {
        store.get_mut(layer.dir_att).value = Matrix::scalar(0.5);
        store.get_mut(layer.dir_ff).value = Matrix::scalar(-0.4);
    }
    let audio_only = model.with_arm(FusionMode::AudioOnly, false);
    let tokens = [2usize, 4, 0];
    let (audio, visual) = streams(&store, &model, &tokens);
    let prefix = [model.cfg.bos(), 2, 4];

    let mut t1 = Tape::new();
    let enc1 = model.encode_on_tape(&store, &mut t1, &audio, Some(&visual)).unwrap();
    let gated = model.logits_on_tape(&store, &mut t1, &enc1, &prefix, None).unwrap();
    let mut t2 = Tape::new();
    let enc2 = audio_only.encode_on_tape(&store, &mut t2, &audio, None).unwrap();
    let plain = audio_only.logits_on_tape(&store, &mut t2, &enc2, &prefix, None).unwrap();
    assert!(
        !t1.value(gated).bits_eq(t2.value(plain)),
        "open gates must actually inject visual context"
    );
}

#[test]
fn audio_encoder_gets_zero_gradient_through_alignment_and_probe() {
    // Unfreeze the audio encoder, then drive losses that reach it only
    // through stop-gradded edges; its grads must stay exactly zero.
    let (mut store, model) = build(13, FusionMode::Gated, true);
    for layer in &model.amf {
        store.get_mut(layer.dir_att).value = Matrix::scalar(0.7);
        store.get_mut(layer.dir_ff).value = Matrix::scalar(0.7);
    }
    for b in &model.sma.blocks {
        store.get_mut(b.out_gate).value = Matrix::scalar(0.9);
    }
    for id in store.ids_with_prefix("enc_a") {
        store.set_requires_grad(id, true);
    }
    let tokens = [1usize, 2, 3];
    let (audio, visual) = streams(&store, &model, &tokens);

    // (a) loss through the refined visual features: the only route into the
    // audio encoder is the alignment cross-attention keys/values.
    store.zero_grads();
    let mut tape = Tape::new();
    let enc = model.encode_on_tape(&store, &mut tape, &audio, Some(&visual)).unwrap();
    let loss = tape.sum_all(enc.xv_hat.unwrap());
    tape.backward(loss).unwrap();
    tape.export_grads(&mut store);
    for id in store.ids_with_prefix("enc_a") {
        assert!(
            store.grad(id).as_slice().iter().all(|g| g.to_bits() == 0.0f64.to_bits()),
            "audio encoder param {} leaked gradient through alignment",
            store.name(id)
        );
    }
    // the visual front end does receive gradient on this loss
    let got_vfront = store
        .ids_with_prefix("vfront")
        .iter()
        .any(|&id| store.grad(id).max_abs() > 0.0);
    assert!(got_vfront, "sanity: the live path must carry gradient");

    // (b) loss through the per-token uncertainties: the only routes into
    // the encoder and the decoder embeddings are the probe's stopped edges.
    store.zero_grads();
    let mut tape = Tape::new();
    let enc = model.encode_on_tape(&store, &mut tape, &audio, Some(&visual)).unwrap();
    let prefix = [model.cfg.bos(), 1, 2];
    let mut s_nodes = Vec::new();
    let _ = model
        .logits_on_tape(&store, &mut tape, &enc, &prefix, Some(&mut s_nodes))
        .unwrap();
    assert_eq!(s_nodes.len(), model.amf.len());
    let mut total = tape.sum_all(s_nodes[0]);
    for s in &s_nodes[1..] {
        let part = tape.sum_all(*s);
        total = tape.add(total, part);
    }
    tape.backward(total).unwrap();
    tape.export_grads(&mut store);
    for prefix_name in ["enc_a", "dec.emb", "dec.pos"] {
        for id in store.ids_with_prefix(prefix_name) {
            assert!(
                store.grad(id).as_slice().iter().all(|g| g.to_bits() == 0.0f64.to_bits()),
                "{} leaked gradient through the probe",
                store.name(id)
            );
        }
    }
    // while the probe projections themselves learn
    let probe_live = store
        .ids_with_prefix("amf.layer0.probe")
        .iter()
        .any(|&id| store.grad(id).max_abs() > 0.0);
    assert!(probe_live, "probe projections must receive gradient by default");
}

#[test]
fn full_training_step_leaves_frozen_components_bitwise_unchanged() {
    let (mut store, model) = build(17, FusionMode::Gated, true);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let data: Vec<Utterance> = (0..6)
        .map(|i| {
            let len = 3 + (i % 3);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..6usize)).collect();
            let (audio, visual) = streams(&store, &model, &tokens);
            Utterance {
                id: format!("utt-{i:04}"),
                tokens,
                audio: FeatureSequence::new(audio, 100.0, Modality::Audio).unwrap(),
                visual: FeatureSequence::new(visual, 25.0, Modality::Visual).unwrap(),
            }
        })
        .collect();

    let before = store.snapshot();
    let cfg = avur_core::train::TrainConfig { steps: 20, batch_size: 2, ..Default::default() };
    avur_core::train::train_stage1(&model, &mut store, &data, &cfg, false, |_, u| {
        u.audio.frames.clone()
    })
    .unwrap();

    let mut amf_moved = false;
    for (i, id) in store.ids().enumerate() {
        let name = store.name(id).to_string();
        let frozen =
            name.starts_with("enc_a") || name.starts_with("enc_v") || name.starts_with("dec.");
        if frozen {
            assert!(
                store.value(id).bits_eq(&before[i]),
                "frozen parameter {name} moved during stage-1 training"
            );
        }
        if name.starts_with("amf") && !store.value(id).bits_eq(&before[i]) {
            amf_moved = true;
        }
    }
    assert!(amf_moved, "fusion parameters should have moved");
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let (mut store, model) = build(41, FusionMode::Gated, true);
    let tokens = vec![0usize, 1, 2];
    let (audio, visual) = streams(&store, &model, &tokens);
    let data = vec![Utterance {
        id: "utt-0000".into(),
        tokens,
        audio: FeatureSequence::new(audio, 100.0, Modality::Audio).unwrap(),
        visual: FeatureSequence::new(visual, 25.0, Modality::Visual).unwrap(),
    }];
    let before = store.snapshot();
    let cfg = avur_core::train::TrainConfig {
        steps: 5,
        batch_size: 1,
        optimizer: avur_core::numerics::AdamWConfig { lr: 0.0, ..Default::default() },
        cosine: false,
        ..Default::default()
    };
    avur_core::train::train_stage1(&model, &mut store, &data, &cfg, false, |_, u| {
        u.audio.frames.clone()
    })
    .unwrap();
    for (i, id) in store.ids().enumerate() {
        assert!(
            store.value(id).bits_eq(&before[i]),
            "zero learning rate moved {}",
            store.name(id)
        );
    }
}

#[test]
fn decode_step_distribution_sums_to_one() {
    let (store, model) = build(19, FusionMode::Gated, true);
    let tokens = [0usize, 1, 2, 3];
    let (audio, visual) = streams(&store, &model, &tokens);
    let enc = model.encode_values(&store, &audio, Some(&visual)).unwrap();
    let dist = model.decode_step(&store, &enc, &[model.cfg.bos(), 0, 1]).unwrap();
    assert_eq!(dist.len(), model.cfg.dec_vocab());
    let sum: f64 = dist.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-12);
    assert!(dist.iter().all(|&p| p >= 0.0));
    // rejects a prefix that does not start with BOS
    assert!(model.decode_step(&store, &enc, &[0, 1]).is_err());
}

#[test]
fn gated_bypass_matches_audio_only_decoding() {
    let (store, model) = build(23, FusionMode::Gated, true);
    let audio_only = model.with_arm(FusionMode::AudioOnly, false);
    let tokens = [5usize, 0, 2];
    let (audio, visual) = streams(&store, &model, &tokens);
    let enc_av = model.encode_values(&store, &audio, Some(&visual)).unwrap();
    let enc_a = audio_only.encode_values(&store, &audio, None).unwrap();
    let p1 = model.decode_step(&store, &enc_av, &[model.cfg.bos(), 5]).unwrap();
    let p2 = audio_only.decode_step(&store, &enc_a, &[model.cfg.bos(), 5]).unwrap();
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn beam_width_one_is_greedy() {
    let (store, model) = build(29, FusionMode::AudioOnly, false);
    let tokens = [1usize, 4, 2, 0];
    let (audio, _) = streams(&store, &model, &tokens);
    let enc = model.encode_values(&store, &audio, None).unwrap();

    // manual greedy: argmax token per step until EOS (ties to lower id)
    let mut prefix = vec![model.cfg.bos()];
    let mut greedy = Vec::new();
    for _ in 0..10 {
        let dist = model.decode_step(&store, &enc, &prefix).unwrap();
        let mut tok = 0usize;
        for (i, p) in dist.iter().enumerate() {
            if *p > dist[tok] {
                tok = i;
            }
        }
        if tok == model.cfg.eos() {
            break;
        }
        greedy.push(tok);
        prefix.push(tok);
    }
    let one = model.greedy_transcribe(&store, &audio, None, 10).unwrap();
    assert_eq!(one, greedy, "width-1 beam must equal greedy decoding");
}

#[test]
fn beam_search_contract_distinct_sorted() {
    let (store, model) = build(31, FusionMode::Gated, true);
    let tokens = [3usize, 3, 1, 0, 2];
    let (audio, visual) = streams(&store, &model, &tokens);
    let opts = BeamOptions { beam_width: 8, n_best: 5, max_gen: 12 };
    let list = model.beam_search(&store, "utt-x", &audio, Some(&visual), &opts).unwrap();
    list.validate().unwrap();
    assert!(list.len() >= 2);
    for w in list.hyps.windows(2) {
        assert!(w[0].s_infer >= w[1].s_infer);
    }
    assert!(model
        .beam_search(&store, "utt-x", &audio, Some(&visual), &BeamOptions { beam_width: 1, n_best: 1, max_gen: 4 })
        .is_err());
}

#[test]
fn exhaustive_width_matches_brute_force_enumeration() {
    // tiny instance: 3 symbols (5-token decoder vocab), max 3 generated tokens
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::new();
    let mut cfg = AvsrConfig::toy(3, 2);
    cfg.d_a = 8;
    cfg.d_v = 6;
    cfg.dec_depth = 1;
    cfg.ffw_hidden = 16;
    cfg.fusion = FusionMode::AudioOnly;
    cfg.use_sma = false;
    let model = AvsrModel::new(&mut store, cfg, &mut rng).unwrap();
    let tokens = [0usize, 2];
    let audio = model.audio_enc.input_stream(&store, &tokens).unwrap();

    let max_gen = 3usize;
    let vocab = model.cfg.dec_vocab();
    let eos = model.cfg.eos();
    let bos = model.cfg.bos();
    let enc = model.encode_values(&store, &audio, None).unwrap();

    let step_logp = |content: &[usize]| -> Vec<f64> {
        let mut prefix = vec![bos];
        prefix.extend_from_slice(content);
        let dist = model.decode_step(&store, &enc, &prefix).unwrap();
        dist.iter().map(|p| p.ln()).collect()
    };

    // brute force over every EOS-terminated sequence of <= max_gen tokens,
    // plus every forced continuation of exactly max_gen non-EOS tokens
    let mut oracle: Vec<(Vec<usize>, f64, bool)> = Vec::new();
    let mut level: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    for depth in 0..max_gen {
        let mut next = Vec::new();
        for (content, sum) in &level {
            let logp = step_logp(content);
            for tok in 0..vocab {
                let s = sum + logp[tok];
                if tok == eos {
                    oracle.push((content.clone(), s / (content.len() + 1) as f64, false));
                } else if depth + 1 < max_gen {
                    let mut c = content.clone();
                    c.push(tok);
                    next.push((c, s));
                } else {
                    let mut c = content.clone();
                    c.push(tok);
                    oracle.push((c, s / max_gen as f64, true));
                }
            }
        }
        level = next;
    }
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));

    let opts = BeamOptions { beam_width: 100_000, n_best: 5, max_gen };
    let list = model.beam_search(&store, "u", &audio, None, &opts).unwrap();
    for (hyp, (otoks, oscore, oforced)) in list.hyps.iter().zip(&oracle) {
        assert_eq!(&hyp.tokens, otoks, "ordering mismatch vs enumeration");
        assert!((hyp.s_infer - oscore).abs() < 1e-9, "score mismatch vs enumeration");
        assert_eq!(hyp.forced, *oforced);
    }
}
