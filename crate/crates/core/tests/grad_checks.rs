//! Finite-difference spot checks through every trainable stack. The
//! acceptance suite runs the same checks over many more seeds; these keep
//! the fast test cycle honest.

use avur_core::features::{FeatureSequence, Modality};
use avur_core::model::{AvsrConfig, AvsrModel, FusionMode};
use avur_core::numerics::{
    check_gradients, AttentionConfig, Matrix, ParamStore, FD_STEP, GRAD_REL_TOL,
};
use avur_core::sma::AlignmentBlock;
use avur_core::amf::AmfLayer;
use avur_core::vur::{rle_compress, ScorerConfig, UnitScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn alignment_block_gradients() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let block = AlignmentBlock::new(&mut store, "sma.block0", cfg, &mut rng);
        store.get_mut(block.out_gate).value = Matrix::scalar(0.3);
        let xv = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let ids = store.ids_with_prefix("sma");
        let worst = check_gradients(
            &mut store,
            &ids,
            |s, tape| {
                let xvn = tape.constant(xv.clone());
                let xan = tape.constant(xa.clone());
                let out = block.forward(tape, s, xvn, xan)?;
                // non-uniform weighting so every output entry matters
                let w = Matrix::from_fn(3, 4, |r, c| 0.3 + (r * 4 + c) as f64 * 0.1);
                let wn = tape.constant(w);
                let prod = tape.hadamard(out, wn);
                Ok(tape.sum_all(prod))
            },
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= GRAD_REL_TOL, "seed {seed}: rel err {worst:.3e}");
    }
}

#[test]
fn fusion_layer_gradients() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let layer = AmfLayer::new(&mut store, "amf.layer0", cfg, 8, &mut rng);
        store.get_mut(layer.dir_att).value = Matrix::scalar(0.4);
        store.get_mut(layer.dir_ff).value = Matrix::scalar(-0.2);
        let x = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let xa = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let xv = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let ids = store.ids_with_prefix("amf");
        let worst = check_gradients(
            &mut store,
            &ids,
            |s, tape| {
                let xn = tape.constant(x.clone());
                let xan = tape.constant(xa.clone());
                let xvn = tape.constant(xv.clone());
                let (out, _) = layer.forward(tape, s, xn, xan, xvn)?;
                let w = Matrix::from_fn(3, 4, |r, c| 0.2 + ((r + 2 * c) as f64) * 0.07);
                let wn = tape.constant(w);
                let prod = tape.hadamard(out, wn);
                Ok(tape.sum_all(prod))
            },
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= GRAD_REL_TOL, "seed {seed}: rel err {worst:.3e}");
    }
}

#[test]
fn teacher_forced_ce_gradients_through_whole_model() {
    for seed in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let mut cfg = AvsrConfig::toy(5, 3);
        cfg.d_a = 8;
        cfg.d_v = 6;
        cfg.dec_depth = 1;
        cfg.enc_depth = 4;
        cfg.ffw_hidden = 12;
        let model = AvsrModel::new(&mut store, cfg, &mut rng).unwrap();
        for layer in &model.amf {
            store.get_mut(layer.dir_att).value = Matrix::scalar(0.3);
            store.get_mut(layer.dir_ff).value = Matrix::scalar(0.2);
        }
        for b in &model.sma.blocks {
            store.get_mut(b.out_gate).value = Matrix::scalar(0.25);
        }
        let tokens = vec![1usize, 4, 0];
        let audio = model.audio_enc.input_stream(&store, &tokens).unwrap();
        let visual = model
            .visual_enc
            .input_stream(&store, &[1usize, 1, 0])
            .unwrap();
        let audio_fs = FeatureSequence::new(audio, 100.0, Modality::Audio).unwrap();
        let visual_fs = FeatureSequence::new(visual, 25.0, Modality::Visual).unwrap();

        // check the stage-1 trainables plus the gate scalars in one pass
        let mut ids = store.ids_with_prefix("vfront");
        ids.extend(store.ids_with_prefix("sma.block0.out_gate"));
        ids.extend(store.ids_with_prefix("amf.layer0.gate_slope"));
        ids.extend(store.ids_with_prefix("amf.layer0.gate_offset"));
        ids.extend(store.ids_with_prefix("amf.layer0.dir_att"));
        ids.extend(store.ids_with_prefix("amf.layer0.probe"));
        ids.extend(store.ids_with_prefix("amf.layer0.visual_xattn.wv"));
        let worst = check_gradients(
            &mut store,
            &ids,
            |s, tape| model.ce_loss_on_tape(s, tape, &audio_fs.frames, Some(&visual_fs.frames), &tokens),
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= GRAD_REL_TOL, "seed {seed}: rel err {worst:.3e}");
    }
}

#[test]
fn scorer_and_adapter_gradients_through_listwise_loss() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let mut cfg = ScorerConfig::toy(5, 6, 4);
        cfg.dim = 8;
        cfg.depth = 1;
        cfg.ffw_hidden = 12;
        cfg.lora_rank = 2;
        cfg.lora_dropout = 0.0; // dropout off for deterministic finite differences
        let scorer = UnitScorer::new(&mut store, cfg, &mut rng).unwrap();
        // nudge the adapters off their zero init so the low-rank path is live
        for id in store.ids_with_prefix("scorer.lora") {
            let (r, c) = store.value(id).shape();
            store.get_mut(id).value = Matrix::from_fn(r, c, |_, _| rng.random_range(-0.2..0.2));
        }
        let frames = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let labels = [2usize, 2, 0, 5, 5, 1];
        let units = rle_compress(&labels, &frames).unwrap();
        let candidates = vec![vec![0usize, 1], vec![0usize, 2, 3], vec![4usize]];

        let mut ids = store.ids_with_prefix("scorer.lora.layer0.attn.q");
        ids.extend(store.ids_with_prefix("scorer.lora.layer0.attn.o"));
        ids.extend(store.ids_with_prefix("scorer.unit_proj"));
        ids.extend(store.ids_with_prefix("scorer.head"));
        let worst = check_gradients(
            &mut store,
            &ids,
            |s, tape| {
                let scores = scorer.score_candidates_on_tape(tape, s, &units, &candidates, None)?;
                avur_core::vur::listwise_loss_on_tape(tape, &scores, 1)
            },
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= GRAD_REL_TOL, "seed {seed}: rel err {worst:.3e}");
    }
}

#[test]
fn lora_zero_b_is_bitwise_identity_and_base_stays_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut store = ParamStore::new();
    let cfg = ScorerConfig::toy(5, 6, 4);
    let scorer = UnitScorer::new(&mut store, cfg, &mut rng).unwrap();
    let frames = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    let units = rle_compress(&[1, 3, 3, 0], &frames).unwrap();
    let candidates = vec![vec![0usize, 1, 2], vec![3usize, 4]];

    // with B = 0 everywhere (the init), scores equal a base-only evaluation
    let with_lora = scorer.score_candidates(&store, &units, &candidates).unwrap();
    // knock out the adapters entirely by zeroing A as well: output must not move
    let mut store2 = store.clone();
    for id in store2.ids_with_prefix("scorer.lora") {
        if store2.name(id).ends_with(".a") {
            let (r, c) = store2.value(id).shape();
            store2.get_mut(id).value = Matrix::zeros(r, c);
        }
    }
    let base_only = scorer.score_candidates(&store2, &units, &candidates).unwrap();
    for (a, b) in with_lora.iter().zip(&base_only) {
        assert_eq!(a.to_bits(), b.to_bits(), "zero-initialized adapter must be exact identity");
    }

    // training the scorer must leave every scorer.base parameter bitwise fixed
    let before = store.snapshot();
    let examples = vec![avur_core::vur::RescoreExample {
        units: std::sync::Arc::new(units),
        candidates,
        i_gt: 0,
    }];
    let tcfg = avur_core::train::TrainConfig { steps: 12, batch_size: 1, ..Default::default() };
    avur_core::vur::train_scorer(&scorer, &mut store, &examples, &tcfg).unwrap();
    let mut lora_moved = false;
    for (i, id) in store.ids().enumerate() {
        let name = store.name(id).to_string();
        if name.starts_with("scorer.base") {
            assert!(store.value(id).bits_eq(&before[i]), "{name} moved");
        }
        if name.starts_with("scorer.lora") && !store.value(id).bits_eq(&before[i]) {
            lora_moved = true;
        }
    }
    assert!(lora_moved, "adapters should have moved");
}

#[test]
fn candidate_order_permutes_scores_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut store = ParamStore::new();
    let cfg = ScorerConfig::toy(6, 8, 4);
    let scorer = UnitScorer::new(&mut store, cfg, &mut rng).unwrap();
    // give the adapters some signal so scores are not all base-random
    for id in store.ids_with_prefix("scorer.lora") {
        let (r, c) = store.value(id).shape();
        store.get_mut(id).value = Matrix::from_fn(r, c, |_, _| rng.random_range(-0.3..0.3));
    }
    for trial in 0..20 {
        let t = 4 + (trial % 3);
        let frames = Matrix::from_fn(t, 4, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..8usize)).collect();
        let units = rle_compress(&labels, &frames).unwrap();
        let cands: Vec<Vec<usize>> = (0..4)
            .map(|_| (0..rng.random_range(1..5usize)).map(|_| rng.random_range(0..6usize)).collect())
            .collect();
        let fwd = scorer.score_candidates(&store, &units, &cands).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let got = scorer.score_candidates(&store, &units, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(
                got[k].to_bits(),
                fwd[i].to_bits(),
                "trial {trial}: scores must permute with candidates, bit for bit"
            );
        }
    }
}
