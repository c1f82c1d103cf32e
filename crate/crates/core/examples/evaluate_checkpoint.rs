//! Saves a briefly trained checkpoint, reloads it and re-scores every
//! domain; the two evaluations write identical CSVs.

use bayeseg::config::RunConfig;
use bayeseg::experiments::{eval_csv, evaluate_checkpoint};
use bayeseg::harness::{format_report, run_training, CHECKPOINT_FILE};
use bayeseg::networks::checkpoint_dtype;
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SplitCounts};

fn main() -> bayeseg::Result<()> {
    let root = std::env::temp_dir().join("bayeseg-evaluate");
    let mut cfg = RunConfig::from_text(include_str!("../../../configs/toy.conf"))?;
    cfg.apply_overrides(&["train.steps=60", "train.eval_every=60"])?;
    cfg.data.path = root.join("data");
    cfg.output = root.join("run");
    let counts = SplitCounts {
        train: 20,
        val: 0,
        test: 8,
        target: 8,
    };
    build_benchmark(
        &cfg.data.path,
        &cfg.data.scene,
        &DomainSpec::default_targets(),
        counts,
        3,
    )?;
    let data = Dataset::load(&cfg.data.path, cfg.data.scene.classes)?;
    let run = run_training(&cfg, &data, |_| {})?;

    let checkpoint = run.dir.join(CHECKPOINT_FILE);
    println!(
        "checkpoint {} ({})",
        checkpoint.display(),
        checkpoint_dtype(&checkpoint)?
    );
    let scores = evaluate_checkpoint(&checkpoint, &data, 1)?;
    assert_eq!(scores, run.scores);
    let again = evaluate_checkpoint(&checkpoint, &data, 2)?;
    assert_eq!(eval_csv(&scores, data.classes)?, eval_csv(&again, data.classes)?);
    print!("{}", format_report("reloaded checkpoint", &[("toy".into(), scores)]));
    Ok(())
}
