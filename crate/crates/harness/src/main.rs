//! Command-line entry point for the toy audio-visual recognition pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use avur_core::nbest::{read_nbest_file, write_nbest_file};
use avur_harness::config::PipelineConfig;
use avur_harness::report::ExperimentReport;
use avur_harness::runner::{
    build_seed, decode_split, first_pass_wer, nbest_filename, rescore_lists, run_ablation,
    run_sweep, train_arm, train_arm_stage2, ArmKind, SavedModel, TrainedArm,
};

#[derive(Parser)]
#[command(name = "avur", about = "Toy audio-visual sequence recognition pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run seeds, comma separated (overrides the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// SNR grid in dB, comma separated (overrides the config).
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<i32>>,
    /// N-best size.
    #[arg(long)]
    n: Option<usize>,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Codebook size.
    #[arg(long)]
    k: Option<usize>,
    /// Visual encoder layer feeding quantization (1-based).
    #[arg(long)]
    layer: Option<usize>,
    /// Interpolation weight on the first-pass score during rescoring.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Clone)]
struct ArmFlags {
    /// Disable the sparse alignment stack.
    #[arg(long)]
    no_sma: bool,
    /// Disable gated fusion (shallow fusion remains when alignment is on).
    #[arg(long)]
    no_amf: bool,
    /// Disable visual-unit rescoring.
    #[arg(long)]
    no_vur: bool,
}

impl ArmFlags {
    fn arm(&self) -> ArmKind {
        match (self.no_sma, self.no_amf) {
            (false, false) => ArmKind::Full,
            (true, false) => ArmKind::AmfVur,
            (false, true) => ArmKind::SmaOnly,
            (true, true) => ArmKind::AudioOnly,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write a summary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base recognizer, train alignment and fusion, decode
    /// test N-best lists per condition.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arm: ArmFlags,
    },
    /// Fit the codebook, adapt the scorer, and rescore the stage-1 N-best
    /// files.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arm: ArmFlags,
    },
    /// Evaluate a saved model across conditions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arm: ArmFlags,
    },
    /// Run the four-arm ablation on clean and the noisy analog.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Grid over visual layer depth and codebook size.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(snr) = &common.snr {
        cfg.eval.snr_grid = snr.clone();
    }
    if let Some(n) = common.n {
        cfg.eval.n_best = n;
    }
    if let Some(b) = common.beam {
        cfg.eval.beam_width = b;
    }
    if let Some(k) = common.k {
        cfg.vur.k = k;
    }
    if let Some(l) = common.layer {
        cfg.vur.layer = l;
    }
    if let Some(l) = common.lambda {
        cfg.eval.lambda = l;
    }
    std::fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn model_path(out: &Path, arm: ArmKind, seed: u64) -> PathBuf {
    out.join(format!("model-{}-seed{seed}.json", arm.name()))
}

fn cmd_gen_data(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    for &seed in &cfg.seeds {
        let art = build_seed_data_only(&cfg, seed)?;
        let path = common.out.join(format!("dataset-seed{seed}.tsv"));
        let mut text = String::from("id\ttokens\tvisemes\taudio_frames\tvisual_frames\n");
        let map: Vec<usize> = cfg.task.to_task(0).viseme_map();
        for split in [&art.1.train, &art.1.dev, &art.1.test] {
            for u in split {
                let toks: Vec<String> = u.tokens.iter().map(|t| t.to_string()).collect();
                let vis: Vec<String> = u.tokens.iter().map(|t| map[*t].to_string()).collect();
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    u.id,
                    toks.join(" "),
                    vis.join(" "),
                    u.audio.len(),
                    u.visual.len()
                ));
            }
        }
        std::fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Dataset without the stage-0 pretraining (gen-data does not need it).
fn build_seed_data_only(
    cfg: &PipelineConfig,
    seed: u64,
) -> anyhow::Result<(avur_core::numerics::ParamStore, avur_harness::task::Dataset)> {
    use avur_harness::seeds::{mix_seed, TAG_DATA, TAG_MODEL};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_MODEL]));
    let mut store = avur_core::numerics::ParamStore::new();
    let model = avur_core::model::AvsrModel::new(
        &mut store,
        cfg.model.to_avsr(cfg.task.vocab_size, cfg.task.num_visemes),
        &mut rng,
    )?;
    let task = cfg.task.to_task(mix_seed(&[seed, TAG_DATA]));
    let ds = avur_harness::task::gen_dataset(&task, &store, &model)?;
    Ok((store, ds))
}

fn cmd_train_stage1(common: &Common, flags: &ArmFlags) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let kind = flags.arm();
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        eprintln!("[seed {seed}] stage 0: pretraining the base recognizer");
        let art = build_seed(&cfg, seed)?;
        eprintln!(
            "[seed {seed}] stage 0 final loss {:.4} nats/token",
            art.stage0_log.final_loss()
        );
        eprintln!("[seed {seed}] stage 1: training arm {}", kind.name());
        let arm = train_arm(&cfg, &art, kind)?;
        if let Some(log) = &arm.stage1_log {
            eprintln!("[seed {seed}] stage 1 final loss {:.4} nats/token", log.final_loss());
        }
        let donors: Vec<_> = art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
        for cond in cfg.eval.conditions() {
            let lists = decode_split(&cfg, &arm, &art.dataset.test, &donors, cond, seed)?;
            let path = common.out.join(nbest_filename(kind.name(), "test", cond, seed));
            write_nbest_file(&path, &lists)?;
            let wer = first_pass_wer(&art.dataset.test, &lists);
            report.push(&cond.label(), kind.modality_str(), &format!("stage1-{}", kind.name()), wer, seed);
            eprintln!("[seed {seed}] {}: WER {:.4}", cond.label(), wer);
        }
        SavedModel {
            arm: kind.name().to_string(),
            seed,
            model: arm.model.clone(),
            store: arm.store.clone(),
            scorer: None,
        }
        .save(&model_path(&common.out, kind, seed))?;
    }
    let csv = common.out.join(format!("stage1-{}.csv", kind.name()));
    report.write_csv(&csv)?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_train_stage2(common: &Common, flags: &ArmFlags) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let kind = flags.arm();
    if !kind.has_vur() && flags.no_vur {
        bail!("train-stage2 with --no-vur has nothing to do");
    }
    if !matches!(kind, ArmKind::Full | ArmKind::AmfVur) {
        bail!("stage 2 requires a gated-fusion arm (drop --no-amf)");
    }
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let saved = SavedModel::load(&model_path(&common.out, kind, seed))
            .with_context(|| "stage-1 model not found; run train-stage1 first")?;
        // the stage-1 N-best files are the rescoring inputs; they must exist
        let mut lists_by_cond = Vec::new();
        for cond in cfg.eval.conditions() {
            let path = common.out.join(nbest_filename(kind.name(), "test", cond, seed));
            if !path.exists() {
                bail!("missing N-best file {}; run train-stage1 first", path.display());
            }
            lists_by_cond.push((cond, read_nbest_file(&path)?));
        }
        eprintln!("[seed {seed}] stage 2: codebook + scorer for arm {}", kind.name());
        let art = build_seed(&cfg, seed)?;
        let mut arm = TrainedArm {
            kind,
            model: saved.model,
            store: saved.store,
            stage1_log: None,
            stage2: None,
        };
        train_arm_stage2(&cfg, &art, &mut arm)?;
        let stage2 = arm.stage2.as_ref().expect("just trained");
        let cb_path = common.out.join(format!("codebook-{}-seed{seed}.bin", kind.name()));
        stage2.codebook.save(&cb_path)?;
        std::fs::write(
            common.out.join(format!("codebook-{}-seed{seed}.txt", kind.name())),
            stage2.codebook.to_text(),
        )?;
        for (cond, lists) in &lists_by_cond {
            let wer = rescore_lists(&cfg, &mut arm, &art.dataset.test, lists)?;
            report.push(&cond.label(), "av", &format!("stage2-{}", kind.name()), wer, seed);
            eprintln!("[seed {seed}] {} rescored: WER {:.4}", cond.label(), wer);
        }
        let stage2 = arm.stage2.take().expect("still present");
        SavedModel {
            arm: kind.name().to_string(),
            seed,
            model: arm.model,
            store: arm.store,
            scorer: Some(stage2.scorer),
        }
        .save(&model_path(&common.out, kind, seed))?;
    }
    let csv = common.out.join(format!("stage2-{}.csv", kind.name()));
    report.write_csv(&csv)?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_eval(common: &Common, flags: &ArmFlags) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let kind = flags.arm();
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let saved = SavedModel::load(&model_path(&common.out, kind, seed))
            .with_context(|| "saved model not found; run train-stage1 (and train-stage2) first")?;
        let art = build_seed_data_only(&cfg, seed)?;
        let dataset = art.1;
        let donors: Vec<_> = dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
        let has_scorer = saved.scorer.is_some();
        let mut arm = TrainedArm {
            kind,
            model: saved.model,
            store: saved.store,
            stage1_log: None,
            stage2: None,
        };
        if has_scorer && !flags.no_vur {
            // rebuild stage-2 artifacts deterministically for rescoring
            let full_art = build_seed(&cfg, seed)?;
            let mut tmp = TrainedArm {
                kind,
                model: arm.model.clone(),
                store: arm.store.clone(),
                stage1_log: None,
                stage2: None,
            };
            train_arm_stage2(&cfg, &full_art, &mut tmp)?;
            arm.stage2 = tmp.stage2;
            arm.store = tmp.store;
        }
        for cond in cfg.eval.conditions() {
            let lists = decode_split(&cfg, &arm, &dataset.test, &donors, cond, seed)?;
            let wer = first_pass_wer(&dataset.test, &lists);
            report.push(&cond.label(), kind.modality_str(), &format!("eval-{}", kind.name()), wer, seed);
            if arm.stage2.is_some() && !flags.no_vur {
                let rescored = rescore_lists(&cfg, &mut arm, &dataset.test, &lists)?;
                report.push(&cond.label(), "av", &format!("eval-{}-rescored", kind.name()), rescored, seed);
            }
        }
    }
    let csv = common.out.join(format!("eval-{}.csv", kind.name()));
    report.write_csv(&csv)?;
    println!("{}", report.to_csv());
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_ablate(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = run_ablation(&cfg)?;
    for d in &out.diags {
        eprintln!(
            "[seed {}] arm {}: fusion-layer calls {}, alignment-block calls {}, rescored lists {}",
            d.seed, d.arm, d.amf_layer_calls, d.sma_block_calls, d.rescored_lists
        );
    }
    let csv = common.out.join("ablation.csv");
    out.report.write_csv(&csv)?;
    println!("{}", out.report.to_csv());
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_sweep(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let report = run_sweep(&cfg)?;
    let csv = common.out.join("sweep.csv");
    report.write_csv(&csv)?;
    println!("{}", report.to_csv());
    println!("wrote {}", csv.display());
    Ok(())
}

trait ArmName {
    fn modality_str(&self) -> &'static str;
}

impl ArmName for ArmKind {
    fn modality_str(&self) -> &'static str {
        match self {
            ArmKind::AudioOnly => "audio",
            _ => "av",
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData { common } => cmd_gen_data(common),
        Cmd::TrainStage1 { common, arm } => cmd_train_stage1(common, arm),
        Cmd::TrainStage2 { common, arm } => cmd_train_stage2(common, arm),
        Cmd::Eval { common, arm } => cmd_eval(common, arm),
        Cmd::Ablate { common } => cmd_ablate(common),
        Cmd::Sweep { common } => cmd_sweep(common),
    }
}
