//! Checkpoint evaluation, posterior decomposition export and ablation suites.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bayeseg_tensor::{Element, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::HyperParams;
use crate::config::RunConfig;
use crate::distributions::standard_normal_field;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::harness::{
    channel_grids, dice_rows, evaluate, format_report, forward, metrics_csv, posteriors, run_training, write_file,
    DomainScores, ItemNoise, Progress, REPORT_FILE, TIMING_FILE,
};
use crate::networks::{checkpoint_dtype, sample_appearance, Networks};
use crate::synth::Dataset;

pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Test Dice of every domain for a checkpoint of either element type.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset, threads: usize) -> Result<Vec<DomainScores>> {
    fn run<T: Element>(path: &Path, data: &Dataset, threads: usize) -> Result<Vec<DomainScores>> {
        let nets = Networks::<T>::load(path)?;
        if nets.config().classes != data.classes {
            return Err(Error::Data(format!(
                "checkpoint has {} classes, dataset {}",
                nets.config().classes,
                data.classes
            )));
        }
        evaluate(&nets, data, &data.domains(), threads)
    }
    match checkpoint_dtype(path)?.as_str() {
        "f32" => run::<f32>(path, data, threads),
        "f64" => run::<f64>(path, data, threads),
        other => Err(Error::Data(format!("checkpoint dtype {other:?} is not supported"))),
    }
}

/// Metrics CSV of a standalone evaluation.
pub fn eval_csv(scores: &[DomainScores], classes: usize) -> Result<Vec<u8>> {
    metrics_csv(&dice_rows(0, "test", scores), classes)
}

/// Posterior fields of one image. `omega` is `sum_k mu_z_k * omega_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub x: ImageGrid,
    pub a: ImageGrid,
    pub m: ImageGrid,
    pub rho: ImageGrid,
    pub upsilon: ImageGrid,
    pub omega: ImageGrid,
    pub z: Vec<ImageGrid>,
}

impl Decomposition {
    /// `(file stem, field)` pairs, `6 + K` of them.
    pub fn fields(&self) -> Vec<(String, &ImageGrid)> {
        let mut out: Vec<(String, &ImageGrid)> = vec![
            ("x".into(), &self.x),
            ("a".into(), &self.a),
            ("m".into(), &self.m),
            ("rho".into(), &self.rho),
            ("upsilon".into(), &self.upsilon),
            ("omega".into(), &self.omega),
        ];
        out.extend(self.z.iter().enumerate().map(|(k, z)| (format!("z{k}"), z)));
        out
    }
}

/// Posterior means with the variance heads active and zero noise, so every
/// sample equals its mean. `a` is drawn with a generator seeded by `seed`.
pub fn decompose<T: Element>(nets: &Networks<T>, y: &ImageGrid, h: &HyperParams, seed: u64) -> Result<Decomposition> {
    let (rows, cols) = y.dims();
    let k = nets.config().classes;
    let zero = ImageGrid::zeros(rows, cols);
    let noise = ItemNoise {
        x: zero.clone(),
        m: zero.clone(),
        z: vec![zero; k],
    };
    let mut g = Graph::new();
    let p = nets.bind(&mut g, false);
    let f = forward(nets, &mut g, &p, y, Some(&noise))?;
    let post = posteriors(&g, &f, y, h)?;
    let x = channel_grids(&g, f.mu_x)?.remove(0);
    let m = channel_grids(&g, f.mu_m)?.remove(0);
    let z = channel_grids(&g, f.mu_z)?;
    let mut omega = ImageGrid::zeros(rows, cols);
    for (zk, wk) in z.iter().zip(&post.omega) {
        for ((o, a), b) in omega.data_mut().iter_mut().zip(zk.data()).zip(wk.data()) {
            *o += a * b;
        }
    }
    let eps = standard_normal_field(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed));
    let a = sample_appearance(&m, &post.rho, &eps)?;
    Ok(Decomposition {
        x,
        a,
        m,
        rho: post.rho,
        upsilon: post.upsilon,
        omega,
        z,
    })
}

pub fn decompose_checkpoint(path: &Path, y: &ImageGrid, h: &HyperParams, seed: u64) -> Result<Decomposition> {
    match checkpoint_dtype(path)?.as_str() {
        "f32" => decompose(&Networks::<f32>::load(path)?, y, h, seed),
        "f64" => decompose(&Networks::<f64>::load(path)?, y, h, seed),
        other => Err(Error::Data(format!("checkpoint dtype {other:?} is not supported"))),
    }
}

/// Binary 8-bit PGM, min-max scaled; a constant field maps to 0.
pub fn gray8_pgm(field: &ImageGrid) -> Vec<u8> {
    let (h, w) = field.dims();
    let (lo, hi) = field.min_max();
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(field.data().iter().map(|&v| {
        if span > 0.0 && span.is_finite() {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `<stem>.pgm` for every field under `dir`.
pub fn write_decomposition(dir: &Path, d: &Decomposition) -> Result<Vec<PathBuf>> {
    d.fields()
        .into_iter()
        .map(|(stem, f)| {
            let path = dir.join(format!("{stem}.pgm"));
            write_file(&path, &gray8_pgm(f))?;
            Ok(path)
        })
        .collect()
}

/// One ablation arm: a name and the settings it applies on top of the base run.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Arm {
    fn new(name: &str, overrides: &[&str]) -> Self {
        Arm {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

fn flags(stochastic: bool, variational: bool, a_net: bool, a_loss: bool, z_net: bool, z_loss: bool) -> [String; 6] {
    [
        format!("ablation.stochastic_mapping={stochastic}"),
        format!("ablation.variational_loss={variational}"),
        format!("ablation.deterministic_appearance={}", !a_net),
        format!("ablation.appearance_loss={a_loss}"),
        format!("ablation.deterministic_segmentation={}", !z_net),
        format!("ablation.segmentation_loss={z_loss}"),
    ]
}

fn flag_arm(name: &str, f: [String; 6]) -> Arm {
    Arm {
        name: name.to_string(),
        overrides: f.to_vec(),
    }
}

/// Arms of a named suite.
///
/// * `core`: ERM, stochastic mapping alone, the full model.
/// * `pruning`: the seven appearance/segmentation pruning rows, as
///   `(a-network, a-loss, z-network, z-loss)` switches.
/// * `sweep:KEY=v1,v2,...`: the full model with one setting varied.
pub fn suite(name: &str) -> Result<Vec<Arm>> {
    let yn = |b: bool| if b { 'Y' } else { 'N' };
    match name {
        "core" => Ok(vec![
            flag_arm("1-erm", flags(false, false, true, true, true, true)),
            flag_arm("2-stochastic-only", flags(true, false, true, true, true, true)),
            flag_arm("3-proposed", flags(true, true, true, true, true, true)),
        ]),
        "pruning" => {
            let rows = [
                [true, true, true, true],
                [false, true, true, true],
                [true, false, true, true],
                [false, false, true, true],
                [true, true, false, true],
                [true, true, true, false],
                [true, true, false, false],
            ];
            Ok(rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let label = format!("{}-{}{}{}{}", i + 1, yn(r[0]), yn(r[1]), yn(r[2]), yn(r[3]));
                    flag_arm(&label, flags(true, true, r[0], r[1], r[2], r[3]))
                })
                .collect())
        }
        other => {
            let spec = other.strip_prefix("sweep:").ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite {other:?} (expected core, pruning or sweep:KEY=v1,v2)"
                ))
            })?;
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("sweep {spec:?} needs KEY=v1,v2,...")))?;
            let arms: Vec<Arm> = values
                .split(',')
                .filter(|v| !v.trim().is_empty())
                .map(|v| Arm::new(&format!("{key}={}", v.trim()), &[&format!("{key}={}", v.trim())]))
                .collect();
            if arms.is_empty() {
                return Err(Error::Config(format!("sweep {spec:?} lists no values")));
            }
            let mut probe = RunConfig::default();
            for a in &arms {
                probe.apply_overrides(&a.overrides)?;
            }
            Ok(arms)
        }
    }
}

/// Scores of one arm: per seed, and averaged case-by-case over seeds.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<DomainScores>>,
    pub mean: Vec<DomainScores>,
    pub seconds: f64,
}

impl ArmResult {
    /// Mean Dice of `domain` for each seed.
    pub fn seed_means(&self, domain: &str) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter_map(|s| s.iter().find(|d| d.domain == domain).map(|d| d.mean()))
            .collect()
    }

    /// Seed-averaged mean Dice of `domain`.
    pub fn domain_mean(&self, domain: &str) -> Option<f64> {
        self.mean.iter().find(|d| d.domain == domain).map(|d| d.mean())
    }
}

/// Runs every arm with every seed. A seed drives both initialization and
/// batch order, so arms sharing a seed see identical batches.
pub fn run_ablation(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    data: &Dataset,
    mut progress: impl FnMut(&Arm, u64, Progress),
) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut results = Vec::new();
    for arm in arms {
        let start = Instant::now();
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.apply_overrides(&arm.overrides)?;
            cfg.apply_overrides(&[format!("train.seed={seed}"), format!("net.seed={seed}")])?;
            cfg.output = base.output.join(arm.slug()).join(format!("seed-{seed}"));
            let run = run_training(&cfg, data, |p| progress(arm, seed, p))?;
            per_seed.push(run.scores);
        }
        let domains = per_seed[0].len();
        let mean = (0..domains)
            .map(|d| DomainScores::average(&per_seed.iter().map(|s| s[d].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        results.push(ArmResult {
            arm: arm.clone(),
            seeds: seeds.to_vec(),
            per_seed,
            mean,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(results)
}

/// One row per arm, seed and domain, plus seed-averaged rows with `seed=mean`.
pub fn ablation_csv(results: &[ArmResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("ablation csv: {e}"));
    w.write_record(["arm", "seed", "domain", "cases", "dice_mean", "dice_std", "dice_drop"])
        .map_err(err)?;
    for r in results {
        let labelled = r
            .seeds
            .iter()
            .map(|s| s.to_string())
            .zip(&r.per_seed)
            .chain(std::iter::once(("mean".to_string(), &r.mean)));
        for (seed, scores) in labelled {
            let source = scores.first().map_or(0.0, |s| s.mean());
            for s in scores {
                w.write_record([
                    r.arm.name.clone(),
                    seed.clone(),
                    s.domain.clone(),
                    s.per_case.len().to_string(),
                    format!("{:.6}", s.mean()),
                    format!("{:.6}", s.std()),
                    format!("{:.6}", source - s.mean()),
                ])
                .map_err(err)?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Data(format!("ablation csv: {e}")))
}

/// Writes the CSV, the text report and a timing file under `dir`.
pub fn write_ablation(dir: &Path, title: &str, results: &[ArmResult]) -> Result<()> {
    write_file(&dir.join(ABLATION_FILE), &ablation_csv(results)?)?;
    let arms: Vec<(String, Vec<DomainScores>)> = results.iter().map(|r| (r.arm.name.clone(), r.mean.clone())).collect();
    write_file(&dir.join(REPORT_FILE), format_report(title, &arms).as_bytes())?;
    let timing: String = results
        .iter()
        .map(|r| format!("{}_seconds={:.3}\n", r.arm.slug(), r.seconds))
        .collect();
    write_file(&dir.join(TIMING_FILE), timing.as_bytes())
}
