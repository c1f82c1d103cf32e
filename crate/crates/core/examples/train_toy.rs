//! Trains the full model on a toy benchmark and prints the per-domain report.
//!
//! Usage: `cargo run --release --example train_toy [-- OUT_DIR [key=value ...]]`

use std::path::PathBuf;

use bayeseg::config::RunConfig;
use bayeseg::harness::{format_report, run_training, Progress};
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SplitCounts};

fn main() -> bayeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bayeseg-train-toy"));
    let mut cfg = RunConfig::from_text(include_str!("../../../configs/toy.conf"))?;
    cfg.apply_overrides(&args.collect::<Vec<_>>())?;
    cfg.data.path = out.join("data");
    cfg.output = out.join("run");

    let counts = SplitCounts {
        train: 40,
        val: 0,
        test: 10,
        target: 10,
    };
    build_benchmark(
        &cfg.data.path,
        &cfg.data.scene,
        &DomainSpec::default_targets(),
        counts,
        cfg.data.seed,
    )?;
    let data = Dataset::load(&cfg.data.path, cfg.data.scene.classes)?;

    let run = run_training(&cfg, &data, |p| {
        if let Progress::Step { step, losses, .. } = p {
            if step % 25 == 0 {
                println!(
                    "step {step:>4}  L_ce {:.4}  L_var {:.1}  total {:.4}",
                    losses.ce, losses.var, losses.total
                );
            }
        }
    })?;
    print!("{}", format_report("test Dice", &[("proposed".into(), run.scores)]));
    println!("artifacts in {} ({:.1}s)", run.dir.display(), run.seconds);
    Ok(())
}
