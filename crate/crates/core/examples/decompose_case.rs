//! Trains a toy model, then exports the posterior fields of one test case
//! (shape, appearance, boundary precision, per-class probabilities) as PGM
//! images and reports where the boundary precision is smallest.

use bayeseg::config::RunConfig;
use bayeseg::experiments::{decompose, write_decomposition};
use bayeseg::harness::train;
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SplitCounts};

fn main() -> bayeseg::Result<()> {
    let root = std::env::temp_dir().join("bayeseg-decompose");
    let mut cfg = RunConfig::from_text(include_str!("../../../configs/toy.conf"))?;
    cfg.data.path = root.join("data");
    let counts = SplitCounts {
        train: 40,
        val: 0,
        test: 4,
        target: 4,
    };
    build_benchmark(
        &cfg.data.path,
        &cfg.data.scene,
        &DomainSpec::default_targets(),
        counts,
        1,
    )?;
    let data = Dataset::load(&cfg.data.path, cfg.data.scene.classes)?;
    let trained = train::<f32>(&cfg, &data, |_| {})?;

    let case = data.split("test", "source")[0];
    let d = decompose(&trained.nets, &case.image, &cfg.hyper, 0)?;
    for p in write_decomposition(&root.join(&case.row.case_id), &d)? {
        println!("{}", p.display());
    }

    let mut sorted = d.upsilon.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p10 = sorted[sorted.len() / 10];
    let boundary = case.labels.boundary();
    let on_edge: Vec<f64> = d
        .upsilon
        .data()
        .iter()
        .zip(&boundary)
        .filter(|(_, b)| **b)
        .map(|(v, _)| *v)
        .collect();
    let below = on_edge.iter().filter(|v| **v < p10).count();
    println!(
        "boundary pixels below the 10th percentile of upsilon: {below}/{}",
        on_edge.len()
    );
    Ok(())
}
