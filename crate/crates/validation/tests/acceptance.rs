//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs the full three-arm, three-seed
//! benchmark, so expect it to take a while.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bayeseg::config::RunConfig;
use bayeseg::experiments::{decompose_checkpoint, eval_csv, evaluate_checkpoint, run_ablation, suite, ArmResult};
use bayeseg::harness::{run_training, Progress, CHECKPOINT_FILE, METRICS_FILE};
use bayeseg::oracle::{OracleOutcome, OracleSuite};
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec, SplitCounts};
use bayeseg_tensor::gradcheck::GradCheck;
use bayeseg_tensor::{check_grad, Graph, Padding, Result as TResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONJUGACY_MIN_INSTANCES: usize = 100;
const CONJUGACY_MAX_SECONDS: f64 = 120.0;
const MC_MIN_PAIRS: usize = 10;
const GRAD_MIN_INSTANCES: usize = 20;
const GRAD_TOL_F64: f64 = 1e-6;
const GRAD_TOL_F32: f64 = 1e-3;
const SOURCE_DICE_MIN: f64 = 85.0;
const HARDEST_MARGIN_MIN: f64 = 5.0;
const STOCHASTIC_BAND: f64 = 3.0;
const ABLATION_MAX_SECONDS: f64 = 45.0 * 60.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const SOURCE: &str = "source";

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("{tag} criterion {} {}: {}", v.id, v.name, v.detail);
}

fn oracle_detail(o: &OracleOutcome) -> String {
    format!(
        "{} n={} err={:.3e}/{:.1e}",
        o.family, o.instances, o.max_error, o.tolerance
    )
}

fn criterion_1(suite: &OracleSuite) -> Verdict {
    let t = Instant::now();
    let outcomes = [
        suite.conjugacy_rho(),
        suite.conjugacy_upsilon(),
        suite.conjugacy_omega(),
        suite.beta_pi_loop_check(),
    ];
    let seconds = t.elapsed().as_secs_f64();
    let mut passed = seconds <= CONJUGACY_MAX_SECONDS;
    let mut parts = Vec::new();
    for o in outcomes {
        match o {
            Ok(o) => {
                passed &= o.passed() && o.instances >= CONJUGACY_MIN_INSTANCES;
                parts.push(oracle_detail(&o));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("error: {e}"));
            }
        }
    }
    parts.push(format!("{seconds:.1}s (limit {CONJUGACY_MAX_SECONDS}s)"));
    Verdict {
        id: 1,
        name: "conjugacy oracles",
        passed,
        detail: parts.join("; "),
    }
}

fn criterion_2(suite: &OracleSuite) -> Verdict {
    let (passed, detail) = match suite.c_monte_carlo() {
        Ok(o) => (
            o.passed() && o.instances > MC_MIN_PAIRS && suite.mc_draws >= 1_000_000,
            format!("{} draws={}", oracle_detail(&o), suite.mc_draws),
        ),
        Err(e) => (false, format!("error: {e}")),
    };
    Verdict {
        id: 2,
        name: "c_k identity",
        passed,
        detail,
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Magnitudes in `[lo, hi]` with random sign, away from the kink at 0.
fn signed_away(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn project<T: bayeseg_tensor::Element>(g: &mut Graph<T>, y: Var, r: &Tensor<f64>) -> TResult<Var> {
    let c = g.constant(r.cast());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

type OpCase = fn(&mut ChaCha8Rng) -> TResult<GradCheck>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add", |rng| {
            let (a, b, r) = (
                uniform(rng, &[2, 3, 4], -2.0, 2.0),
                uniform(rng, &[3, 1], -2.0, 2.0),
                uniform(rng, &[2, 3, 4], -1.0, 1.0),
            );
            check_grad!(vec![a, b], |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, &r)
            })
        }),
        ("sub", |rng| {
            let (a, b, r) = (
                uniform(rng, &[2, 3, 4], -2.0, 2.0),
                uniform(rng, &[3, 1], -2.0, 2.0),
                uniform(rng, &[2, 3, 4], -1.0, 1.0),
            );
            check_grad!(vec![a, b], |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, &r)
            })
        }),
        ("mul", |rng| {
            let (a, b, r) = (
                uniform(rng, &[2, 3, 4], -2.0, 2.0),
                uniform(rng, &[3, 1], -2.0, 2.0),
                uniform(rng, &[2, 3, 4], -1.0, 1.0),
            );
            check_grad!(vec![a, b], |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, &r)
            })
        }),
        ("div", |rng| {
            let (a, b, r) = (
                uniform(rng, &[2, 3, 4], -2.0, 2.0),
                uniform(rng, &[3, 1], 0.5, 2.0),
                uniform(rng, &[2, 3, 4], -1.0, 1.0),
            );
            check_grad!(vec![a, b], |g, v| {
                let y = g.div(v[0], v[1])?;
                project(g, y, &r)
            })
        }),
        ("neg/exp/square", |rng| {
            let (x, r) = (uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -1.0, 1.0));
            check_grad!(vec![x], |g, v| {
                let a = g.neg(v[0])?;
                let b = g.exp(a)?;
                let c = g.square(v[0])?;
                let y = g.add(b, c)?;
                project(g, y, &r)
            })
        }),
        ("log", |rng| {
            let (x, r) = (uniform(rng, &[3, 4], 0.3, 3.0), uniform(rng, &[3, 4], -1.0, 1.0));
            check_grad!(vec![x], |g, v| {
                let y = g.log(v[0])?;
                project(g, y, &r)
            })
        }),
        ("relu/softplus", |rng| {
            let (x, r) = (signed_away(rng, &[3, 4], 0.05, 3.0), uniform(rng, &[3, 4], -1.0, 1.0));
            check_grad!(vec![x], |g, v| {
                let a = g.relu(v[0])?;
                let b = g.softplus(v[0])?;
                let y = g.mul(a, b)?;
                project(g, y, &r)
            })
        }),
        ("scale/add_scalar/clamp_min", |rng| {
            let (x, r) = (signed_away(rng, &[4, 5], 0.05, 2.0), uniform(rng, &[4, 5], -1.0, 1.0));
            check_grad!(vec![x], |g, v| {
                let s = g.scale(v[0], 1.7);
                let t = g.add_scalar(s, 0.3);
                let c = g.clamp_min(v[0], 0.0);
                let y = g.mul(t, c)?;
                project(g, y, &r)
            })
        }),
        ("conv2d zero padding", |rng| {
            let (x, k, r) = (
                uniform(rng, &[1, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[1, 3, 5, 5], -1.0, 1.0),
            );
            check_grad!(vec![x, k], |g, v| {
                let y = g.conv2d(v[0], v[1], 1, Padding::Zero(1))?;
                project(g, y, &r)
            })
        }),
        ("conv2d replicate padding", |rng| {
            let (x, k, r) = (
                uniform(rng, &[1, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[1, 3, 5, 5], -1.0, 1.0),
            );
            check_grad!(vec![x, k], |g, v| {
                let y = g.conv2d(v[0], v[1], 1, Padding::Replicate(1))?;
                project(g, y, &r)
            })
        }),
        ("conv2d strided with bias", |rng| {
            let (x, k, b, r) = (
                uniform(rng, &[1, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
                uniform(rng, &[1, 3, 3, 3], -1.0, 1.0),
            );
            check_grad!(vec![x, k, b], |g, v| {
                let y = g.conv2d_bias(v[0], v[1], v[2], 2, Padding::Zero(1))?;
                project(g, y, &r)
            })
        }),
        ("channel_softmax", |rng| {
            let (x, r) = (
                uniform(rng, &[2, 3, 4, 4], -3.0, 3.0),
                uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
            );
            check_grad!(vec![x], |g, v| {
                let y = g.channel_softmax(v[0])?;
                project(g, y, &r)
            })
        }),
        ("instance_norm", |rng| {
            let (x, r) = (
                uniform(rng, &[2, 3, 4, 4], -2.0, 2.0),
                uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
            );
            check_grad!(vec![x], |g, v| {
                let y = g.instance_norm(v[0], 1e-5)?;
                project(g, y, &r)
            })
        }),
        ("upsample2x", |rng| {
            let (x, r) = (
                uniform(rng, &[1, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[1, 2, 6, 6], -1.0, 1.0),
            );
            check_grad!(vec![x], |g, v| {
                let y = g.upsample2x(v[0])?;
                project(g, y, &r)
            })
        }),
        ("sum/mean", |rng| {
            let (a, b) = (uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[2, 5], -2.0, 2.0));
            check_grad!(vec![a, b], |g, v| {
                let sa = g.square(v[0])?;
                let s = g.sum(sa);
                let eb = g.exp(v[1])?;
                let m = g.mean(eb);
                g.mul(s, m)
            })
        }),
        ("weighted_sq_norm", |rng| {
            let (a, w) = (uniform(rng, &[2, 6], -2.0, 2.0), uniform(rng, &[2, 6], 0.5, 2.0));
            check_grad!(vec![a, w], |g, v| g.weighted_sq_norm(v[0], v[1]))
        }),
        ("reshape/narrow/concat", |rng| {
            let (a, b, r) = (
                uniform(rng, &[1, 4, 3, 3], -2.0, 2.0),
                uniform(rng, &[1, 2, 3, 3], -2.0, 2.0),
                uniform(rng, &[1, 5, 3, 3], -1.0, 1.0),
            );
            check_grad!(vec![a, b], |g, v| {
                let head = g.narrow(v[0], 1, 1, 3)?;
                let sq = g.square(v[1])?;
                let flat = g.reshape(sq, &[2, 9])?;
                let back = g.reshape(flat, &[1, 2, 3, 3])?;
                let tail = g.narrow(back, 1, 0, 2)?;
                let cat = g.concat(&[head, tail], 1)?;
                project(g, cat, &r)
            })
        }),
    ]
}

fn criterion_3(suite: &OracleSuite) -> Verdict {
    let mut passed = suite.grad_instances >= GRAD_MIN_INSTANCES;
    let mut parts = Vec::new();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let cases = op_cases();
    for (name, case) in &cases {
        for seed in 0..GRAD_MIN_INSTANCES as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match case(&mut rng) {
                Ok(r) => {
                    worst64 = worst64.max(r.rel_err_f64);
                    worst32 = worst32.max(r.rel_err_f32);
                    if !r.passes(GRAD_TOL_F64, GRAD_TOL_F32) {
                        passed = false;
                        parts.push(format!("{name} seed {seed} failed"));
                    }
                }
                Err(e) => {
                    passed = false;
                    parts.push(format!("{name}: {e}"));
                }
            }
        }
    }
    parts.push(format!(
        "{} ops x {GRAD_MIN_INSTANCES}: f64 {worst64:.2e}/{GRAD_TOL_F64:.0e} f32 {worst32:.2e}/{GRAD_TOL_F32:.0e}",
        cases.len()
    ));
    for o in [suite.loss_gradients(), suite.operator_gradients()] {
        match o {
            Ok(o) => {
                passed &= o.passed();
                parts.push(oracle_detail(&o));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("error: {e}"));
            }
        }
    }
    Verdict {
        id: 3,
        name: "gradient suite",
        passed,
        detail: parts.join("; "),
    }
}

fn criterion_4(suite: &OracleSuite) -> Verdict {
    let (passed, detail) = match suite.variance_minimizers() {
        Ok(o) => (o.passed(), oracle_detail(&o)),
        Err(e) => (false, format!("error: {e}")),
    };
    Verdict {
        id: 4,
        name: "analytic variance minimizers",
        passed,
        detail,
    }
}

fn arm<'a>(results: &'a [ArmResult], name: &str) -> &'a ArmResult {
    results.iter().find(|r| r.arm.name == name).expect("core arm")
}

fn hardest_domain() -> String {
    DomainSpec::default_targets().last().expect("targets").name.clone()
}

fn dice(r: &ArmResult, domain: &str) -> f64 {
    r.domain_mean(domain).unwrap_or(f64::NAN)
}

fn criterion_5(results: &[ArmResult], seconds: f64) -> Verdict {
    let hard = hardest_domain();
    let (full, erm) = (arm(results, "3-proposed"), arm(results, "1-erm"));
    let source = dice(full, SOURCE);
    let margin = dice(full, &hard) - dice(erm, &hard);
    let drop_full = source - dice(full, &hard);
    let drop_erm = dice(erm, SOURCE) - dice(erm, &hard);
    let checks = [
        source >= SOURCE_DICE_MIN,
        margin >= HARDEST_MARGIN_MIN,
        drop_full < drop_erm,
        seconds <= ABLATION_MAX_SECONDS,
    ];
    Verdict {
        id: 5,
        name: "full model beats ERM on the hardest target",
        passed: checks.iter().all(|&c| c),
        detail: format!(
            "source Dice {source:.2} (>= {SOURCE_DICE_MIN}) [{}]; {hard} margin over ERM {margin:.2} (>= {HARDEST_MARGIN_MIN}) [{}]; \
             drop {drop_full:.2} vs ERM {drop_erm:.2} (strictly smaller) [{}]; all arms {seconds:.0}s (<= {ABLATION_MAX_SECONDS}s) [{}]",
            ok(checks[0]),
            ok(checks[1]),
            ok(checks[2]),
            ok(checks[3])
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn criterion_6(results: &[ArmResult]) -> Verdict {
    let hard = hardest_domain();
    let (stoch, erm) = (arm(results, "2-stochastic-only"), arm(results, "1-erm"));
    let gap = dice(stoch, &hard) - dice(erm, &hard);
    Verdict {
        id: 6,
        name: "stochastic-only arm tracks ERM on the hardest target",
        passed: gap.abs() <= STOCHASTIC_BAND,
        detail: format!(
            "{hard}: stochastic-only {:.2}, ERM {:.2}, gap {gap:.2} (|gap| <= {STOCHASTIC_BAND})",
            dice(stoch, &hard),
            dice(erm, &hard)
        ),
    }
}

/// Nearest-rank percentile of unsorted values.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

/// `(boundary median, 10th percentile of the whole map)` of the exported
/// boundary posterior for one case.
fn boundary_stats(checkpoint: &Path, case: &bayeseg::synth::Case, cfg: &RunConfig) -> bayeseg::Result<(f64, f64)> {
    let d = decompose_checkpoint(checkpoint, &case.image, &cfg.hyper, cfg.train.seed)?;
    let ups = d.upsilon.data();
    let on_edge: Vec<f64> = ups
        .iter()
        .zip(case.labels.boundary())
        .filter(|(_, b)| *b)
        .map(|(v, _)| *v)
        .collect();
    Ok((percentile(&on_edge, 50.0), percentile(ups, 10.0)))
}

fn criterion_7(checkpoint: &Path, data: &Dataset, cfg: &RunConfig) -> Verdict {
    let cases = data.split("test", SOURCE);
    let mut below = 0;
    let mut first = None;
    let mut error = None;
    for c in &cases {
        match boundary_stats(checkpoint, c, cfg) {
            Ok((median, p10)) => {
                below += (median < p10) as usize;
                first.get_or_insert((median, p10));
            }
            Err(e) => error = Some(e.to_string()),
        }
    }
    let (passed, detail) = match (first, error) {
        (Some((median, p10)), None) => (
            median < p10,
            format!(
                "exported case {}: boundary median {median:.3e} vs 10th percentile {p10:.3e}; {below}/{} source test cases below",
                cases[0].row.case_id,
                cases.len()
            ),
        ),
        (_, Some(e)) => (false, format!("error: {e}")),
        (None, None) => (false, "no source test cases".into()),
    };
    Verdict {
        id: 7,
        name: "boundary posterior semantics",
        passed,
        detail,
    }
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable file");
                out.push((p.strip_prefix(dir).expect("under dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(work: &Path, base: &RunConfig, data: &Dataset, checkpoint: &Path) -> Verdict {
    let run = || -> bayeseg::Result<Vec<String>> {
        let mut mismatches = Vec::new();
        let counts = SplitCounts {
            train: 6,
            val: 2,
            test: 3,
            target: 3,
        };
        let targets = DomainSpec::default_targets();
        let gen: Vec<_> = ["gen-a", "gen-b"]
            .iter()
            .map(|n| {
                build_benchmark(&work.join(n), &base.data.scene, &targets, counts, 11)?;
                Ok(files_under(&work.join(n)))
            })
            .collect::<bayeseg::Result<_>>()?;
        if gen[0] != gen[1] {
            mismatches.push("gen-data".to_string());
        }

        let mut cfg = base.clone();
        cfg.apply_overrides(&["train.steps=10", "train.eval_every=5", "train.eval_average=2"])?;
        let mut metrics = Vec::new();
        for (i, threads) in [1, 1, 2].into_iter().enumerate() {
            cfg.train.threads = threads;
            cfg.output = work.join(format!("train-{i}"));
            let a = run_training(&cfg, data, |_| {})?;
            metrics.push(std::fs::read(a.dir.join(METRICS_FILE)).map_err(|e| bayeseg::Error::Data(e.to_string()))?);
        }
        if metrics[0] != metrics[1] || metrics[0] != metrics[2] {
            mismatches.push("train metrics".to_string());
        }

        let eval =
            || -> bayeseg::Result<Vec<u8>> { eval_csv(&evaluate_checkpoint(checkpoint, data, 1)?, data.classes) };
        if eval()? != eval()? {
            mismatches.push("eval metrics".to_string());
        }
        Ok(mismatches)
    };
    let (passed, detail) = match run() {
        Ok(m) if m.is_empty() => (
            true,
            "gen-data files, train metrics.csv (threads 1, 1, 2) and eval.csv identical".to_string(),
        ),
        Ok(m) => (false, format!("differs: {}", m.join(", "))),
        Err(e) => (false, format!("error: {e}")),
    };
    Verdict {
        id: 8,
        name: "determinism",
        passed,
        detail,
    }
}

fn main() -> ExitCode {
    let oracles = OracleSuite::default();
    let mut verdicts = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4] {
        let v = f(&oracles);
        report(&v);
        verdicts.push(v);
    }

    let work = tempfile::tempdir().expect("temp dir");
    let mut base = RunConfig::benchmark();
    base.data.path = work.path().join("data");
    base.output = work.path().join("ablation");
    let benchmark = build_benchmark(
        &base.data.path,
        &base.data.scene,
        &DomainSpec::default_targets(),
        base.data.counts,
        base.data.seed,
    )
    .and_then(|_| Dataset::load(&base.data.path, base.data.scene.classes));
    let data = match benchmark {
        Ok(d) => d,
        Err(e) => {
            eprintln!("benchmark generation failed: {e}");
            return ExitCode::FAILURE;
        }
    };

    let t = Instant::now();
    let arms = suite("core").expect("core suite");
    let results = run_ablation(&base, &arms, &SEEDS, &data, |arm, seed, p| {
        if let Progress::Eval { step, scores } = p {
            if step == base.train.steps {
                let line: Vec<String> = scores.iter().map(|s| format!("{} {:.1}", s.domain, s.mean())).collect();
                eprintln!("[{} seed {seed}] {}", arm.name, line.join(", "));
            }
        }
    });
    let seconds = t.elapsed().as_secs_f64();
    let results = match results {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ablation failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    for v in [criterion_5(&results, seconds), criterion_6(&results)] {
        report(&v);
        verdicts.push(v);
    }

    let proposed = arms.iter().find(|a| a.name == "3-proposed").expect("proposed arm");
    let checkpoint = base.output.join(proposed.slug()).join("seed-0").join(CHECKPOINT_FILE);
    let mut seed0 = base.clone();
    seed0.apply_overrides(&proposed.overrides).expect("arm overrides");
    for v in [
        criterion_7(&checkpoint, &data, &seed0),
        criterion_8(work.path(), &seed0, &data, &checkpoint),
    ] {
        report(&v);
        verdicts.push(v);
    }

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.passed)
        .map(|v| v.id.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
