use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bayeseg::config::{AblationFlags, RunConfig};
use bayeseg::experiments::{
    decompose_checkpoint, eval_csv, evaluate_checkpoint, run_ablation, suite, write_ablation, write_decomposition,
    EVAL_FILE,
};
use bayeseg::harness::{
    format_report, run_metadata, run_training, write_file, Progress, CONFIG_FILE, META_FILE, REPORT_FILE,
};
use bayeseg::oracle::OracleSuite;
use bayeseg::synth::{build_benchmark, Dataset, DomainSpec};
use bayeseg::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bayeseg",
    version,
    about = "Bayesian shape/appearance segmentation workflows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file; `#` starts a comment line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (sets data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (sets output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trailing key=value overrides, applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain benchmark.
    GenData(Common),
    /// Train one arm and evaluate it on every domain.
    Train {
        #[command(flatten)]
        common: Common,
        /// proposed, erm or stochastic-only.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on every domain's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the posterior fields of one case as 8-bit PGM images.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Case id from the manifest; defaults to the first source test case.
        #[arg(long)]
        case: Option<String>,
    },
    /// Train every arm of a suite over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// core, pruning or sweep:KEY=v1,v2,...
        #[arg(long, default_value = "core")]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Run the numerical oracle suite.
    OracleCheck {
        /// Fewer Monte-Carlo draws, for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(d) = &common.data {
        cfg.set("data.path", &d.display().to_string())?;
    }
    if let Some(o) = &common.out {
        cfg.set("output.dir", &o.display().to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data.path, cfg.data.scene.classes)
}

fn require(checkpoint: Option<PathBuf>) -> Result<PathBuf> {
    checkpoint.ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn report_progress(prefix: &str, log_every: usize, p: Progress) {
    match p {
        Progress::Step { step, steps, losses } if step % log_every == 0 || step == steps => {
            eprintln!(
                "{prefix}step {step}/{steps} L_ce={:.4} L_var={:.1} total={:.4}",
                losses.ce, losses.var, losses.total
            );
        }
        Progress::Eval { step, scores } => {
            for s in scores {
                eprintln!("{prefix}eval step {step} {} dice={:.2}", s.domain, s.mean());
            }
        }
        _ => {}
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())
}

fn gen_data(common: Common) -> Result<()> {
    let cfg = resolve(&common)?;
    let targets = DomainSpec::default_targets();
    let rows = build_benchmark(
        &cfg.data.path,
        &cfg.data.scene,
        &targets,
        cfg.data.counts,
        cfg.data.seed,
    )?;
    write_config(&cfg.data.path, &cfg)?;
    let mut summary: Vec<(String, String, usize)> = Vec::new();
    for r in &rows {
        match summary.iter_mut().find(|(d, s, _)| *d == r.domain && *s == r.split) {
            Some(e) => e.2 += 1,
            None => summary.push((r.domain.clone(), r.split.clone(), 1)),
        }
    }
    println!("{} cases written to {}", rows.len(), cfg.data.path.display());
    for (d, s, n) in summary {
        println!("  {d:<20} {s:<6} {n}");
    }
    Ok(())
}

fn train(common: Common, ablation: Option<String>) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(name) = ablation {
        let f = AblationFlags::preset(&name)?;
        for (k, v) in [
            ("ablation.stochastic_mapping", f.stochastic_mapping),
            ("ablation.variational_loss", f.variational_loss),
            ("ablation.deterministic_appearance", f.deterministic_appearance),
            ("ablation.deterministic_segmentation", f.deterministic_segmentation),
            ("ablation.appearance_loss", f.appearance_loss),
            ("ablation.segmentation_loss", f.segmentation_loss),
        ] {
            cfg.set(k, &v.to_string())?;
        }
    }
    let data = load_data(&cfg)?;
    let every = cfg.train.log_every;
    let run = run_training(&cfg, &data, |p| report_progress("", every, p))?;
    eprintln!("wrote {}", run.dir.display());
    print!(
        "{}",
        format_report("test Dice (mean+-std, change vs source)", &[("run".into(), run.scores)])
    );
    Ok(())
}

fn eval(common: Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let checkpoint = require(checkpoint)?;
    let cfg = resolve(&common)?;
    let data = load_data(&cfg)?;
    let scores = evaluate_checkpoint(&checkpoint, &data, cfg.train.worker_threads())?;
    write_config(&cfg.output, &cfg)?;
    write_file(&cfg.output.join(EVAL_FILE), &eval_csv(&scores, data.classes)?)?;
    let report = format_report(
        "test Dice (mean+-std, change vs source)",
        &[(checkpoint.display().to_string(), scores)],
    );
    write_file(&cfg.output.join(REPORT_FILE), report.as_bytes())?;
    let meta = run_metadata(&cfg, &[("checkpoint", checkpoint.display().to_string())]);
    write_file(&cfg.output.join(META_FILE), meta.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn decompose(common: Common, checkpoint: Option<PathBuf>, case: Option<String>) -> Result<()> {
    let checkpoint = require(checkpoint)?;
    let cfg = resolve(&common)?;
    let data = load_data(&cfg)?;
    let chosen = match &case {
        Some(id) => data.cases.iter().find(|c| &c.row.case_id == id),
        None => data.split("test", "source").into_iter().next(),
    }
    .ok_or_else(|| {
        Error::Data(format!(
            "case {:?} not found",
            case.as_deref().unwrap_or("<first source test>")
        ))
    })?;
    let d = decompose_checkpoint(&checkpoint, &chosen.image, &cfg.hyper, cfg.train.seed)?;
    let dir = cfg.output.join(&chosen.row.case_id);
    write_config(&cfg.output, &cfg)?;
    for p in write_decomposition(&dir, &d)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn ablate(common: Common, suite_name: String, seeds: Vec<u64>) -> Result<()> {
    let cfg = resolve(&common)?;
    let arms = suite(&suite_name)?;
    let data = load_data(&cfg)?;
    write_config(&cfg.output, &cfg)?;
    let every = cfg.train.log_every;
    let results = run_ablation(&cfg, &arms, &seeds, &data, |arm, seed, p| {
        report_progress(&format!("[{} seed {seed}] ", arm.name), every, p)
    })?;
    let title = format!("suite {suite_name}: test Dice averaged over seeds {seeds:?}");
    write_ablation(&cfg.output, &title, &results)?;
    let arms: Vec<_> = results.into_iter().map(|r| (r.arm.name, r.mean)).collect();
    print!("{}", format_report(&title, &arms));
    Ok(())
}

fn oracle_check(quick: bool) -> Result<bool> {
    let mut suite = OracleSuite::default();
    if quick {
        suite.mc_draws = 100_000;
    }
    let outcomes = suite.run()?;
    let mut first_failure = None;
    for o in &outcomes {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<62} n={:<5} max_err={:.3e} tol={:.1e} {:.2}s",
            o.family, o.instances, o.max_error, o.tolerance, o.seconds
        );
        if !o.passed() && first_failure.is_none() {
            first_failure = Some(o.family);
        }
    }
    if let Some(f) = first_failure {
        eprintln!("oracle failed: {f}");
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::Train { common, ablation } => train(common, ablation).map(|_| true),
        Command::Eval { common, checkpoint } => eval(common, checkpoint).map(|_| true),
        Command::Decompose {
            common,
            checkpoint,
            case,
        } => decompose(common, checkpoint, case).map(|_| true),
        Command::Ablate { common, suite, seeds } => ablate(common, suite, seeds).map(|_| true),
        Command::OracleCheck { quick } => oracle_check(quick),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
