//! `--selftest`: the invariant suite at reduced size, one line per check.

use std::fmt;

use anyhow::Result;

use crate::checks::{self, BELLMAN_Z_TOL, FORWARD_BACKWARD_TOL, GAIN_TOL, LQR_DUAL_TOL, MDP_ENUMERATION_TOL};
use crate::config::{Experiment, ExperimentConfig};
use crate::run_experiment;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: &'static str, residual: f64, tolerance: f64) -> Self {
        Self { name, residual, tolerance, passed: residual <= tolerance }
    }

    fn failed(name: &'static str, tolerance: f64) -> Self {
        Self { name, residual: f64::NAN, tolerance, passed: false }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} residual = {:.3e}  tolerance = {:.1e}", self.name, self.residual, self.tolerance)
    }
}

fn record(name: &'static str, tolerance: f64, measured: Result<f64>) -> CheckResult {
    match measured {
        Ok(r) => CheckResult::at_most(name, r, tolerance),
        Err(_) => CheckResult::failed(name, tolerance),
    }
}

fn small_config(name: &str, seed: u64, workers: usize) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults_for(name)?;
    cfg.seed = seed;
    cfg.workers = workers;
    match &mut cfg.experiment {
        Experiment::LqValue(c) => {
            c.grid.start = -1.0;
            c.grid.stop = 1.0;
            c.grid.step = 1.0;
            c.sample_sizes = vec![50, 200];
        }
        Experiment::LqRollout(c) => c.variance_paths = 50,
        Experiment::Cartpole(c) => {
            c.horizon = 4;
            c.rollouts = 2;
            c.samples_per_action = 40;
        }
        Experiment::MdpDemo(_) => {}
    }
    Ok(cfg)
}

/// Number of experiments whose CSV differs between 1 and 4 workers.
fn determinism_mismatches(seed: u64) -> Result<f64> {
    let mut mismatches = 0;
    for name in crate::config::EXPERIMENTS {
        let one = run_experiment(&small_config(name, seed, 1)?)?.csv;
        let four = run_experiment(&small_config(name, seed, 4)?)?.csv;
        mismatches += usize::from(one != four);
    }
    Ok(mismatches as f64)
}

pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut results = vec![
        record("forward/backward log Z", FORWARD_BACKWARD_TOL, checks::forward_backward_residual(seed, 50, false)),
        record("LQR dual forms", LQR_DUAL_TOL, checks::lqr_dual_residual(seed, 50)),
        record("policy gain vs LQR", GAIN_TOL, checks::gain_residual(seed, 50)),
        record("MDP path enumeration", MDP_ENUMERATION_TOL, checks::mdp_enumeration_residual(seed, 5, 4, 5)),
        record(
            "Bellman consistency (z)",
            BELLMAN_Z_TOL,
            checks::bellman_points(seed, 4, 3000, 300, 150)
                .map(|pts| pts.iter().map(|p| p.z_score).fold(0.0, f64::max)),
        ),
        record("determinism across workers", 0.0, determinism_mismatches(seed)),
    ];
    results.push(match checks::mdp_perturbation_check(seed, 4, 5, 20) {
        Ok(o) => CheckResult::at_most("MDP optimality", o.violations as f64, 0.0),
        Err(_) => CheckResult::failed("MDP optimality", 0.0),
    });
    // The suite must notice a damaged Riccati solution.
    let mutated = checks::forward_backward_residual(seed, 10, true);
    results.push(match mutated {
        Ok(r) => CheckResult {
            name: "mutation: corrupted P caught",
            residual: r,
            tolerance: FORWARD_BACKWARD_TOL,
            passed: r > FORWARD_BACKWARD_TOL,
        },
        Err(_) => CheckResult::failed("mutation: corrupted P caught", FORWARD_BACKWARD_TOL),
    });
    results
}
