//! Two-stage training orchestration, per-condition evaluation, ablation
//! arms, and the layer/codebook sweep.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use avur_core::features::Utterance;
use avur_core::model::{AvsrConfig, AvsrModel, BeamOptions, FusionMode};
use avur_core::nbest::NBestList;
use avur_core::numerics::{AdamWConfig, Matrix, ParamStore};
use avur_core::train::{train_ce, train_stage1, TrainConfig, TrainLog};
use avur_core::vur::{
    self, kmeans_fit, quantize_frames, rescore, rle_compress, select_oracle, train_scorer,
    Codebook, RescoreExample, ScorerConfig, UnitCache, UnitScorer, VisualUnitSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{HarnessError, Result};
use crate::noise::{mix_noise, Condition};
use crate::report::ExperimentReport;
use crate::seeds::{mix_seed, tag, TAG_DATA, TAG_EVAL, TAG_KMEANS, TAG_MODEL, TAG_S2DATA, TAG_SCORER, TAG_STAGE0, TAG_STAGE1, TAG_STAGE2};
use crate::task::{gen_dataset, Dataset};
use crate::wer::WerAccumulator;

/// The ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmKind {
    /// Base recognizer, no visual pathway.
    AudioOnly,
    /// Alignment stack plus shallow fusion (refined visual frames appended
    /// to the decoder memory); no gated fusion, no rescoring.
    SmaOnly,
    /// Gated fusion without the alignment stack, plus rescoring.
    AmfVur,
    /// Everything: alignment, gated fusion, rescoring.
    Full,
}

impl ArmKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArmKind::AudioOnly => "audio-only",
            ArmKind::SmaOnly => "sma-only",
            ArmKind::AmfVur => "amf-vur",
            ArmKind::Full => "full",
        }
    }

    fn fusion(&self) -> FusionMode {
        match self {
            ArmKind::AudioOnly => FusionMode::AudioOnly,
            ArmKind::SmaOnly => FusionMode::ShallowConcat,
            ArmKind::AmfVur | ArmKind::Full => FusionMode::Gated,
        }
    }

    fn use_sma(&self) -> bool {
        matches!(self, ArmKind::SmaOnly | ArmKind::Full)
    }

    pub fn has_vur(&self) -> bool {
        matches!(self, ArmKind::AmfVur | ArmKind::Full)
    }

    fn modality(&self) -> &'static str {
        match self {
            ArmKind::AudioOnly => "audio",
            _ => "av",
        }
    }
}

/// Everything one run seed shares across arms: the parameter store with a
/// pretrained base recognizer, the construction-time model view, and the
/// generated dataset.
pub struct SeedArtifacts {
    pub seed: u64,
    pub store: ParamStore,
    pub model: AvsrModel,
    pub dataset: Dataset,
    pub stage0_log: TrainLog,
}

fn train_cfg(steps: usize, batch: usize, lr: f64, cfg: &PipelineConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: batch,
        optimizer: AdamWConfig {
            lr,
            weight_decay: cfg.train.weight_decay,
            clip_norm: Some(cfg.train.clip_norm),
            ..Default::default()
        },
        seed,
        divergence_factor: 10.0,
        cosine: true,
        lr_floor_frac: 0.1,
    }
}

/// Multi-condition training stream: per (step, utterance) one condition is
/// drawn from {clean} + grid and fresh noise is mixed in.
fn noisy_stream<'a>(
    cfg: &'a PipelineConfig,
    seed: u64,
    stage_tag: u64,
    donors: Arc<Vec<Matrix>>,
) -> impl FnMut(usize, &Utterance) -> Matrix + 'a {
    let conditions = cfg.train.conditions();
    let kind = cfg.eval.noise;
    move |step, utt| {
        let key = mix_seed(&[seed, stage_tag, step as u64, tag(&utt.id)]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let cond = conditions[rng.random_range(0..conditions.len())];
        let noise_seed = rng.random::<u64>();
        let pool: Vec<&Matrix> = donors.iter().collect();
        match mix_noise(&utt.audio, &cond.spec(kind), noise_seed, &pool) {
            Ok(fs) => fs.frames,
            Err(_) => utt.audio.frames.clone(),
        }
    }
}

/// Build the model and dataset for one seed and pretrain the base
/// recognizer (audio-only teacher forcing over mixed conditions). This
/// stands in for the pretrained ASR the later stages freeze.
pub fn build_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedArtifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_MODEL]));
    let mut store = ParamStore::new();
    let avsr_cfg: AvsrConfig = cfg.model.to_avsr(cfg.task.vocab_size, cfg.task.num_visemes);
    let model = AvsrModel::new(&mut store, avsr_cfg, &mut rng)?;
    let task = cfg.task.to_task(mix_seed(&[seed, TAG_DATA]));
    let dataset = gen_dataset(&task, &store, &model)?;

    let donors = Arc::new(dataset.train.iter().map(|u| u.audio.frames.clone()).collect::<Vec<_>>());
    let arm = model.with_arm(FusionMode::AudioOnly, false);
    let tcfg = train_cfg(
        cfg.train.stage0_steps,
        cfg.train.batch_size,
        cfg.train.lr_stage0,
        cfg,
        mix_seed(&[seed, TAG_STAGE0]),
    );
    let stage0_log = train_ce(
        &arm,
        &mut store,
        &dataset.train,
        &["dec"],
        &tcfg,
        noisy_stream(cfg, seed, TAG_STAGE0, donors),
    )?;
    // back to the all-frozen baseline state
    store.set_trainable_prefixes(&[]);
    Ok(SeedArtifacts { seed, store, model, dataset, stage0_log })
}

/// One trained ablation arm: its own parameter store (cloned from the
/// shared base) plus the arm-configured model view.
pub struct TrainedArm {
    pub kind: ArmKind,
    pub model: AvsrModel,
    pub store: ParamStore,
    pub stage1_log: Option<TrainLog>,
    pub stage2: Option<Stage2Artifacts>,
}

pub struct Stage2Artifacts {
    pub codebook: Codebook,
    pub scorer: UnitScorer,
    pub cache: UnitCache,
    pub train_log: TrainLog,
    pub rescored_lists: u64,
}

/// Stage-1 training for an arm (no-op for the audio-only arm).
pub fn train_arm(cfg: &PipelineConfig, art: &SeedArtifacts, kind: ArmKind) -> Result<TrainedArm> {
    let model = art.model.with_arm(kind.fusion(), kind.use_sma());
    let mut store = art.store.clone();
    let stage1_log = if kind == ArmKind::AudioOnly {
        None
    } else {
        let donors = Arc::new(art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect::<Vec<_>>());
        let tcfg = train_cfg(
            cfg.train.stage1_steps,
            cfg.train.batch_size,
            cfg.train.lr_stage1,
            cfg,
            mix_seed(&[art.seed, TAG_STAGE1]),
        );
        let log = train_stage1(
            &model,
            &mut store,
            &art.dataset.train,
            &tcfg,
            cfg.model.freeze_probe,
            noisy_stream(cfg, art.seed, TAG_STAGE1, donors),
        )?;
        store.set_trainable_prefixes(&[]);
        Some(log)
    };
    Ok(TrainedArm { kind, model, store, stage1_log, stage2: None })
}

fn beam_opts(cfg: &PipelineConfig) -> BeamOptions {
    BeamOptions {
        beam_width: cfg.eval.beam_width,
        n_best: cfg.eval.n_best,
        max_gen: cfg.task.max_len + cfg.eval.max_gen_margin,
    }
}

/// Decode one split under one condition, returning the N-best lists in
/// utterance order.
pub fn decode_split(
    cfg: &PipelineConfig,
    arm: &TrainedArm,
    split: &[Utterance],
    donors: &[Matrix],
    condition: Condition,
    seed: u64,
) -> Result<Vec<NBestList>> {
    let spec = condition.spec(cfg.eval.noise);
    let pool: Vec<&Matrix> = donors.iter().collect();
    let opts = beam_opts(cfg);
    let mut lists = Vec::with_capacity(split.len());
    for utt in split {
        let noise_seed = mix_seed(&[seed, TAG_EVAL, cond_tag(condition), tag(&utt.id)]);
        let audio = mix_noise(&utt.audio, &spec, noise_seed, &pool)?;
        let visual = if arm.model.cfg.fusion == FusionMode::AudioOnly {
            None
        } else {
            Some(&utt.visual.frames)
        };
        lists.push(arm.model.beam_search(&arm.store, &utt.id, &audio.frames, visual, &opts)?);
    }
    Ok(lists)
}

fn cond_tag(c: Condition) -> u64 {
    match c {
        Condition::Clean => 1_000_003,
        Condition::SnrDb(db) => (db as i64 + 1_000_000) as u64,
    }
}

/// First-pass WER from decoded lists.
pub fn first_pass_wer(split: &[Utterance], lists: &[NBestList]) -> f64 {
    let mut acc = WerAccumulator::default();
    for (utt, list) in split.iter().zip(lists) {
        acc.add(&utt.tokens, &list.top1().tokens);
    }
    acc.rate()
}

/// Best achievable WER over each list (the N-best oracle bound).
pub fn oracle_wer(split: &[Utterance], lists: &[NBestList]) -> f64 {
    let mut acc = WerAccumulator::default();
    for (utt, list) in split.iter().zip(lists) {
        let i = select_oracle(list, &utt.tokens).expect("non-empty reference");
        acc.add(&utt.tokens, &list.hyps[i].tokens);
    }
    acc.rate()
}

/// Visual features at the configured encoder layer.
fn layer_features(arm: &TrainedArm, cfg: &PipelineConfig, utt: &Utterance) -> Matrix {
    let outs = arm.model.visual_enc.forward_stream_values(&arm.store, &utt.visual.frames);
    outs[cfg.vur.layer - 1].clone()
}

fn units_for(
    model: &AvsrModel,
    store: &ParamStore,
    cfg: &PipelineConfig,
    cache: &mut UnitCache,
    codebook: &Codebook,
    utt: &Utterance,
) -> Result<Arc<VisualUnitSequence>> {
    Ok(cache.get_or_compute(&utt.id, || {
        let outs = model.visual_enc.forward_stream_values(store, &utt.visual.frames);
        let feats = &outs[cfg.vur.layer - 1];
        let labels = quantize_frames(feats, codebook);
        rle_compress(&labels, feats)
    })?)
}

/// Stage 2 for an arm: fit the codebook on train-split visual features at
/// the configured layer, decode training N-best lists, adapt the scorer
/// with the list-wise objective.
pub fn train_arm_stage2(cfg: &PipelineConfig, art: &SeedArtifacts, arm: &mut TrainedArm) -> Result<()> {
    if cfg.vur.layer < 1 || cfg.vur.layer > arm.model.visual_enc.depth() {
        return Err(HarnessError::Config(format!(
            "vur.layer {} outside 1..={}",
            cfg.vur.layer,
            arm.model.visual_enc.depth()
        )));
    }
    // pooled training frames at layer l
    let mut pooled_rows: Vec<Matrix> = Vec::with_capacity(art.dataset.train.len());
    for utt in &art.dataset.train {
        pooled_rows.push(layer_features(arm, cfg, utt));
    }
    let refs: Vec<&Matrix> = pooled_rows.iter().collect();
    let pooled = Matrix::vstack(&refs);
    let codebook = kmeans_fit(
        &pooled,
        cfg.vur.k,
        cfg.vur.kmeans_iters,
        mix_seed(&[art.seed, TAG_KMEANS]),
    )?;

    let mut cache = UnitCache::new();
    // training lists: decode each train utterance under a cycling condition
    let conditions = cfg.train.conditions();
    let donors: Vec<Matrix> = art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
    let pool: Vec<&Matrix> = donors.iter().collect();
    let opts = beam_opts(cfg);
    let mut examples: Vec<RescoreExample> = Vec::new();
    for (i, utt) in art.dataset.train.iter().enumerate() {
        let cond = conditions[i % conditions.len()];
        let noise_seed = mix_seed(&[art.seed, TAG_S2DATA, i as u64]);
        let audio = mix_noise(&utt.audio, &cond.spec(cfg.eval.noise), noise_seed, &pool)?;
        let visual = Some(&utt.visual.frames);
        let list = arm.model.beam_search(&arm.store, &utt.id, &audio.frames, visual, &opts)?;
        let i_gt = select_oracle(&list, &utt.tokens)?;
        // no contrast, no signal: skip lists whose candidates are all
        // equally close to the reference
        let dists: Vec<usize> = list
            .hyps
            .iter()
            .map(|h| vur::edit_distance(&h.tokens, &utt.tokens))
            .collect();
        if dists.iter().min() == dists.iter().max() {
            continue;
        }
        let units = units_for(&arm.model, &arm.store, cfg, &mut cache, &codebook, utt)?;
        examples.push(RescoreExample {
            units,
            candidates: list.hyps.iter().map(|h| h.tokens.clone()).collect(),
            i_gt,
        });
    }
    if examples.len() < 4 {
        return Err(HarnessError::Run(format!(
            "stage2: only {} contrastive lists; the first pass is too strong or too weak",
            examples.len()
        )));
    }

    let mut scorer_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[art.seed, TAG_SCORER]));
    let scorer_cfg = ScorerConfig {
        lora_rank: cfg.vur.lora_rank,
        lora_alpha: cfg.vur.lora_alpha,
        lora_dropout: cfg.vur.lora_dropout,
        ..ScorerConfig::toy(cfg.task.vocab_size, cfg.vur.k, cfg.model.d_v)
    };
    let scorer = UnitScorer::new(&mut arm.store, scorer_cfg, &mut scorer_rng)?;
    let tcfg = train_cfg(
        cfg.train.stage2_steps,
        cfg.train.stage2_batch,
        cfg.train.lr_stage2,
        cfg,
        mix_seed(&[art.seed, TAG_STAGE2]),
    );
    let train_log = train_scorer(&scorer, &mut arm.store, &examples, &tcfg)?;
    arm.store.set_trainable_prefixes(&[]);
    arm.stage2 = Some(Stage2Artifacts { codebook, scorer, cache, train_log, rescored_lists: 0 });
    Ok(())
}

/// Rescore previously decoded test lists with the arm's trained scorer.
/// Returns the rescored corpus WER.
pub fn rescore_lists(
    cfg: &PipelineConfig,
    arm: &mut TrainedArm,
    split: &[Utterance],
    lists: &[NBestList],
) -> Result<f64> {
    let TrainedArm { model, store, stage2, .. } = arm;
    let stage2 = stage2.as_mut().ok_or_else(|| HarnessError::Run("stage2 not trained".into()))?;
    let mut acc = WerAccumulator::default();
    for (utt, list) in split.iter().zip(lists) {
        let units = units_for(model, store, cfg, &mut stage2.cache, &stage2.codebook, utt)?;
        let candidates: Vec<Vec<usize>> = list.hyps.iter().map(|h| h.tokens.clone()).collect();
        let r = stage2.scorer.score_candidates(store, &units, &candidates)?;
        let out = rescore(list, &r, cfg.eval.lambda)?;
        stage2.rescored_lists += 1;
        acc.add(&utt.tokens, out.top1_tokens(list));
    }
    Ok(acc.rate())
}

/// Per-arm instrumentation for one seed.
#[derive(Debug, Clone)]
pub struct ArmDiag {
    pub arm: &'static str,
    pub seed: u64,
    pub amf_layer_calls: u64,
    pub sma_block_calls: u64,
    pub rescored_lists: u64,
    /// (condition label, first-pass wer, oracle wer, rescored wer)
    pub oracle_rows: Vec<(String, f64, f64, Option<f64>)>,
}

pub struct SuiteOptions {
    pub arms: Vec<ArmKind>,
    /// Conditions evaluated for audio-visual arms.
    pub av_conditions: Vec<Condition>,
    /// Conditions evaluated for the audio-only arm.
    pub audio_conditions: Vec<Condition>,
}

pub struct SuiteOutput {
    pub report: ExperimentReport,
    pub diags: Vec<ArmDiag>,
}

/// Train and evaluate the requested arms for every configured seed.
///
/// Report stages: `audio-only` rows for the audio baseline; `wo-vur`
/// (first-pass) and `full` (rescored) for the full arm; `stage1-amf`
/// and `amf-vur` for the alignment-free arm; `sma-only` for shallow fusion.
pub fn run_suite(cfg: &PipelineConfig, opts: &SuiteOptions) -> Result<SuiteOutput> {
    let mut report = ExperimentReport::default();
    let mut diags = Vec::new();
    for &seed in &cfg.seeds {
        let art = build_seed(cfg, seed)?;
        let donors: Vec<Matrix> = art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
        for &kind in &opts.arms {
            let mut arm = train_arm(cfg, &art, kind)?;
            if kind.has_vur() {
                train_arm_stage2(cfg, &art, &mut arm)?;
            }
            let conditions = if kind == ArmKind::AudioOnly {
                &opts.audio_conditions
            } else {
                &opts.av_conditions
            };
            let mut diag = ArmDiag {
                arm: kind.name(),
                seed,
                amf_layer_calls: 0,
                sma_block_calls: 0,
                rescored_lists: 0,
                oracle_rows: Vec::new(),
            };
            for &cond in conditions {
                let lists = decode_split(cfg, &arm, &art.dataset.test, &donors, cond, seed)?;
                let first = first_pass_wer(&art.dataset.test, &lists);
                let oracle = oracle_wer(&art.dataset.test, &lists);
                let rescored = if kind.has_vur() {
                    Some(rescore_lists(cfg, &mut arm, &art.dataset.test, &lists)?)
                } else {
                    None
                };
                let label = cond.label();
                match kind {
                    ArmKind::AudioOnly => {
                        report.push(&label, kind.modality(), "audio-only", first, seed)
                    }
                    ArmKind::SmaOnly => report.push(&label, "av", "sma-only", first, seed),
                    ArmKind::AmfVur => {
                        report.push(&label, "av", "stage1-amf", first, seed);
                        report.push(&label, "av", "amf-vur", rescored.unwrap(), seed);
                    }
                    ArmKind::Full => {
                        report.push(&label, "av", "wo-vur", first, seed);
                        report.push(&label, "av", "full", rescored.unwrap(), seed);
                    }
                }
                diag.oracle_rows.push((label, first, oracle, rescored));
            }
            diag.amf_layer_calls = arm.model.counters.amf();
            diag.sma_block_calls = arm.model.counters.sma();
            diag.rescored_lists = arm.stage2.as_ref().map(|s| s.rescored_lists).unwrap_or(0);
            diags.push(diag);
        }
    }
    Ok(SuiteOutput { report, diags })
}

/// Table-style ablation: the four arms on clean and one noisy condition.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<SuiteOutput> {
    let noisy = cfg
        .eval
        .snr_grid
        .iter()
        .copied()
        .find(|&db| db == 0)
        .unwrap_or_else(|| cfg.eval.snr_grid.first().copied().unwrap_or(0));
    let conds = vec![Condition::Clean, Condition::SnrDb(noisy)];
    let opts = SuiteOptions {
        arms: vec![ArmKind::Full, ArmKind::AmfVur, ArmKind::SmaOnly, ArmKind::AudioOnly],
        av_conditions: conds.clone(),
        audio_conditions: conds,
    };
    run_suite(cfg, &opts)
}

/// Layer-depth x codebook-size sweep on clean and the 0 dB analog. Stage-0
/// and stage-1 are shared per seed; each grid point refits the codebook and
/// retrains the scorer.
pub fn run_sweep(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    let conds = [Condition::Clean, Condition::SnrDb(0)];
    for &seed in &cfg.seeds {
        let art = build_seed(cfg, seed)?;
        let donors: Vec<Matrix> = art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
        let base_arm = train_arm(cfg, &art, ArmKind::Full)?;
        // decode the test lists once per condition; the grid only changes rescoring
        let mut lists_by_cond = Vec::new();
        for &cond in &conds {
            lists_by_cond.push(decode_split(cfg, &base_arm, &art.dataset.test, &donors, cond, seed)?);
        }
        for layer in 1..=art.model.visual_enc.depth() {
            for &k in &cfg.vur.sweep_k {
                let mut point_cfg = cfg.clone();
                point_cfg.vur.layer = layer;
                point_cfg.vur.k = k;
                let mut arm = TrainedArm {
                    kind: base_arm.kind,
                    model: base_arm.model.with_arm(FusionMode::Gated, base_arm.model.cfg.use_sma),
                    store: base_arm.store.clone(),
                    stage1_log: None,
                    stage2: None,
                };
                train_arm_stage2(&point_cfg, &art, &mut arm)?;
                for (ci, &cond) in conds.iter().enumerate() {
                    let wer = rescore_lists(&point_cfg, &mut arm, &art.dataset.test, &lists_by_cond[ci])?;
                    report.push(&cond.label(), "av", &format!("stage2-l{layer}-k{k}"), wer, seed);
                }
            }
        }
    }
    Ok(report)
}

/// A trained arm serialized for hand-off between CLI invocations.
#[derive(Serialize, Deserialize)]
pub struct SavedModel {
    pub arm: String,
    pub seed: u64,
    pub model: AvsrModel,
    pub store: ParamStore,
    pub scorer: Option<UnitScorer>,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| HarnessError::Run(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SavedModel> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Run(e.to_string()))
    }
}

/// Deterministic per-condition N-best file name.
pub fn nbest_filename(arm: &str, split: &str, cond: Condition, seed: u64) -> String {
    format!("nbest-{arm}-{split}-{}-seed{seed}.tsv", cond.label())
}

/// Map of condition -> decoded lists, used by the file-based CLI flow.
pub type DecodedLists = BTreeMap<String, Vec<NBestList>>;
