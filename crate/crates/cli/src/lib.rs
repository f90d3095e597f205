//! Experiment runner for `kl-control`: JSON-configured experiments rendered
//! as CSV, and a self-test of the library's invariants.

pub mod checks;
pub mod config;
pub mod csv;
pub mod experiments;
pub mod selftest;

use anyhow::{Context, Result};

use config::{Experiment, ExperimentConfig};

/// CSV text plus human-readable lines meant for stderr (timings, failures).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: String,
    pub diagnostics: Vec<String>,
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    Ok(pool.install(f))
}

/// Runs the configured experiment. Overrides in `cfg` must already be applied.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    with_workers(cfg.workers, || -> Result<RunOutput> {
        let seed = cfg.seed;
        Ok(match &cfg.experiment {
            Experiment::LqValue(c) => {
                let report = experiments::run_lq_value(c, seed)?;
                RunOutput { csv: report.to_csv(c, seed), diagnostics: report.diagnostics() }
            }
            Experiment::LqRollout(c) => {
                let report = experiments::run_lq_rollout(c, seed)?;
                RunOutput { csv: report.to_csv(c, seed), diagnostics: Vec::new() }
            }
            Experiment::Cartpole(c) => {
                let report = experiments::run_cartpole(c, seed)?;
                RunOutput { csv: report.to_csv(c, seed), diagnostics: report.diagnostics() }
            }
            Experiment::MdpDemo(c) => {
                let report = experiments::run_mdp_demo(c)?;
                RunOutput { csv: report.to_csv(seed), diagnostics: Vec::new() }
            }
        })
    })?
}
