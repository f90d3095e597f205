use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use kl_control_cli::config::{ExperimentConfig, EXPERIMENTS};
use kl_control_cli::{run_experiment, selftest};

/// Run KL-control experiments and write their results as CSV.
#[derive(Debug, Parser)]
#[command(name = "klctl", version)]
struct Args {
    /// Experiment to run with built-in defaults (lq-value, lq-rollout, cartpole, mdp-demo).
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
    experiment: Option<String>,
    /// JSON config file; its "experiment" field must agree with --experiment if both are given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Primary Monte-Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the invariant suite instead of an experiment.
    #[arg(long, conflicts_with_all = ["experiment", "config", "samples", "out"])]
    selftest: bool,
}

fn resolve_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.experiment) {
        (Some(path), name) => {
            let cfg = ExperimentConfig::load(path)?;
            if let Some(name) = name {
                anyhow::ensure!(
                    cfg.experiment.name() == name,
                    "--experiment {name} disagrees with config experiment {}",
                    cfg.experiment.name()
                );
            }
            cfg
        }
        (None, Some(name)) => ExperimentConfig::defaults_for(name)?,
        (None, None) => anyhow::bail!("give --experiment, --config, or --selftest"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = args.samples {
        cfg.samples = Some(s);
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    cfg.apply_overrides();
    Ok(cfg)
}

fn run(args: Args) -> Result<ExitCode> {
    if args.selftest {
        let seed = args.seed.unwrap_or(1);
        let workers = args.workers.unwrap_or(1);
        anyhow::ensure!(workers > 0, "workers must be positive");
        let results = kl_control_cli::with_workers(workers, || selftest::run_selftest(seed))?;
        for r in &results {
            println!("{r}");
        }
        let failed = results.iter().filter(|r| !r.passed).count();
        println!("{} checks, {failed} failed", results.len());
        return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let cfg = resolve_config(&args)?;
    let started = std::time::Instant::now();
    let output = run_experiment(&cfg)?;
    for line in &output.diagnostics {
        eprintln!("{line}");
    }
    eprintln!("{}: finished in {:.2} s", cfg.experiment.name(), started.elapsed().as_secs_f64());
    match &cfg.out {
        Some(path) => std::fs::write(path, &output.csv).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(output.csv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
