//! Renders a small multi-domain benchmark and summarizes it.
//!
//! Usage: `cargo run --example generate_benchmark [-- OUT_DIR]`

use std::path::PathBuf;

use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SceneSpec, SplitCounts};

fn main() -> bayeseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bayeseg-benchmark"));
    let scene = SceneSpec::default();
    let counts = SplitCounts {
        train: 20,
        val: 4,
        test: 6,
        target: 6,
    };
    let targets = DomainSpec::default_targets();
    let rows = build_benchmark(&out, &scene, &targets, counts, 0)?;
    println!("{} cases in {}", rows.len(), out.display());

    let data = Dataset::load(&out, scene.classes)?;
    for domain in data.domains() {
        let cases = data.split("test", &domain);
        let (lo, hi) = cases
            .iter()
            .map(|c| c.image.min_max())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (l, h)| {
                (a.min(l), b.max(h))
            });
        let mean = cases.iter().map(|c| c.image.mean()).sum::<f64>() / cases.len() as f64;
        println!(
            "{domain:<20} test={:<3} intensity range [{lo:+.2}, {hi:+.2}] mean {mean:+.3}",
            cases.len()
        );
    }
    Ok(())
}
