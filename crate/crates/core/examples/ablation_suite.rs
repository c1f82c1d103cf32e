//! Runs the three-arm ablation (ERM, stochastic mapping only, full model)
//! on a toy benchmark with two seeds and writes `ablation.csv`.
//!
//! Pass `sweep:hyper.lambda=1e-6,1e-5,1e-4` or `pruning` to run another suite.

use bayeseg::config::RunConfig;
use bayeseg::experiments::{run_ablation, suite, write_ablation, ABLATION_FILE};
use bayeseg::harness::format_report;
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SplitCounts};

fn main() -> bayeseg::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "core".into());
    let root = std::env::temp_dir().join("bayeseg-ablation");
    let mut cfg = RunConfig::from_text(include_str!("../../../configs/toy.conf"))?;
    cfg.apply_overrides(&["train.steps=120", "train.eval_every=120"])?;
    cfg.data.path = root.join("data");
    cfg.output = root.join("runs");
    let counts = SplitCounts {
        train: 30,
        val: 0,
        test: 8,
        target: 8,
    };
    build_benchmark(
        &cfg.data.path,
        &cfg.data.scene,
        &DomainSpec::default_targets(),
        counts,
        2,
    )?;
    let data = Dataset::load(&cfg.data.path, cfg.data.scene.classes)?;

    let arms = suite(&name)?;
    let results = run_ablation(&cfg, &arms, &[0, 1], &data, |_, _, _| {})?;
    let title = format!("suite {name}, seeds 0 and 1");
    write_ablation(&cfg.output, &title, &results)?;
    let rows: Vec<_> = results.iter().map(|r| (r.arm.name.clone(), r.mean.clone())).collect();
    print!("{}", format_report(&title, &rows));
    println!("{}", cfg.output.join(ABLATION_FILE).display());
    Ok(())
}
