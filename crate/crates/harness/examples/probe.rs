use avur_harness::config::PipelineConfig;
use avur_harness::runner::{build_seed, decode_split, first_pass_wer, train_arm, ArmKind};
use avur_harness::noise::Condition;

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.train.stage0_steps = 3000;
    let t = std::time::Instant::now();
    let art = build_seed(&cfg, 1).unwrap();
    println!("stage0 in {:.0}s", t.elapsed().as_secs_f64());
    let donors: Vec<_> = art.dataset.train.iter().map(|u| u.audio.frames.clone()).collect();
    let conds = [Condition::Clean, Condition::SnrDb(0), Condition::SnrDb(-5)];

    for (kind, steps) in [(ArmKind::AmfVur, 5000usize), (ArmKind::Full, 5000)] {
        let mut c = cfg.clone();
        c.train.stage1_steps = steps;
        c.train.lr_stage1 = 1e-2;
        let t = std::time::Instant::now();
        let arm = train_arm(&c, &art, kind).unwrap();
        let log = arm.stage1_log.as_ref().unwrap();
        let ma: f64 = log.losses.iter().rev().take(200).sum::<f64>() / 200.0;
        print!("{} s={steps} ({:.0}s) CE(ma) {:.3} |", kind.name(), t.elapsed().as_secs_f64(), ma);
        for cond in conds {
            let lists = decode_split(&c, &arm, &art.dataset.test, &donors, cond, 1).unwrap();
            print!(" {} {:.4}", cond.label(), first_pass_wer(&art.dataset.test, &lists));
        }
        println!();
    }
}
