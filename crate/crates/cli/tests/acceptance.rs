//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//! Runs with its own harness so the lines are printed even when everything passes.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use kl_control_cli::checks;
use kl_control_cli::config::{Experiment, ExperimentConfig, EXPERIMENTS};
use kl_control_cli::experiments::{run_cartpole, run_lq_rollout, run_lq_value};
use kl_control_cli::with_workers;

const SEED: u64 = 20240901;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

fn forward_backward() -> Outcome {
    let (r, t) = timed(|| checks::forward_backward_residual(SEED, 200, false).unwrap());
    outcome(
        r <= 1e-8 && t < Duration::from_secs(30),
        format!("200 instances, max |dlogZ| = {r:.3e} (tol 1e-8), {:.2} s (limit 30 s)", t.as_secs_f64()),
    )
}

fn lqr_dual() -> Outcome {
    let r = checks::lqr_dual_residual(SEED, 200).unwrap();
    outcome(r <= 1e-8, format!("200 instances, max |dV| = {r:.3e} (tol 1e-8)"))
}

fn policy_gain() -> Outcome {
    let r = checks::gain_residual(SEED, 200).unwrap();
    outcome(r <= 1e-10, format!("200 instances, max |dK| = {r:.3e} (tol 1e-10)"))
}

fn value_grid() -> Outcome {
    let Experiment::LqValue(cfg) = ExperimentConfig::defaults_for("lq-value").unwrap().experiment else { unreachable!() };
    let (report, t) = timed(|| with_workers(4, || run_lq_value(&cfg, SEED)).unwrap().unwrap());
    let last = cfg.sample_sizes.len() - 1;
    let mut within = 0;
    let mut worst_abs = 0.0_f64;
    let mut worst_z = 0.0_f64;
    for row in &report.rows {
        let v = row.v_mc[last].expect("estimate");
        let se = row.std_error.expect("stderr");
        let d = (v - row.v_exact).abs();
        within += usize::from(d <= 3.0 * se);
        worst_abs = worst_abs.max(d);
        worst_z = worst_z.max(d / se);
    }
    let n = report.rows.len();
    let fraction = within as f64 / n as f64;
    let passed = fraction >= 0.95 && worst_abs <= 0.2 && t < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "S=3000, seed {SEED}: {within}/{n} within 3 stderr ({:.1}%, need >= 95%), max |dV| = {worst_abs:.3} (need <= 0.2), max |dV|/stderr = {worst_z:.2}, {:.2} s on 4 workers",
            100.0 * fraction,
            t.as_secs_f64()
        ),
    )
}

fn matched_pairs() -> Outcome {
    let Experiment::LqRollout(mut cfg) = ExperimentConfig::defaults_for("lq-rollout").unwrap().experiment else { unreachable!() };
    cfg.pairs = vec![(3.0, 10.0), (30.0, 1.0)];
    let report = run_lq_rollout(&cfg, SEED).unwrap();
    let Some(m) = report.matched.first() else { return outcome(false, "pairs not recognised as matched") };
    let first_is_sigma10 = report.pairs[m.first].sigma == 10.0;
    outcome(
        m.max_gain_difference <= 1e-12 && m.first_covariance_larger && first_is_sigma10,
        format!(
            "(3, 10) vs (30, 1): max |dK| = {:.3e} (tol 1e-12), covariance larger at every stage = {}",
            m.max_gain_difference, m.first_covariance_larger
        ),
    )
}

fn finite_mdp() -> Outcome {
    let r = checks::mdp_enumeration_residual(SEED, 20, 4, 5).unwrap();
    let p = checks::mdp_perturbation_check(SEED, 4, 5, 100).unwrap();
    outcome(
        r <= 1e-12 && p.violations == 0,
        format!(
            "enumeration max |dz| = {r:.3e} (tol 1e-12); p* cost {:.6} vs cheapest of 100 perturbed {:.6}, {} cheaper",
            p.optimal_cost, p.cheapest_perturbed_cost, p.violations
        ),
    )
}

fn bellman() -> Outcome {
    let points = checks::bellman_points(SEED, 10, 5000, 500, 200).unwrap();
    let worst = points.iter().map(|p| p.z_score).fold(0.0, f64::max);
    let inside = points.iter().filter(|p| p.z_score <= 3.0).count();
    outcome(inside == points.len(), format!("{inside}/10 states within 3 combined stderr, max {worst:.2}"))
}

fn cartpole() -> Outcome {
    let Experiment::Cartpole(cfg) = ExperimentConfig::defaults_for("cartpole").unwrap().experiment else { unreachable!() };
    let (report, t) = timed(|| with_workers(8, || run_cartpole(&cfg, SEED)).unwrap().unwrap());
    let fraction = report.stabilized_fraction(10, 0.3);
    let failed = report.runs.iter().filter(|r| r.is_err()).count();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        fraction >= 0.9 && t < Duration::from_secs(600),
        format!(
            "50 rollouts, S=5000: {:.0}% with final mean |theta| < 0.3 (need >= 90%), {failed} failed, {:.1} s with 8 workers on {cores} core(s) (limit 600 s)",
            100.0 * fraction,
            t.as_secs_f64()
        ),
    )
}

/// Runs the binary for `cfg` and returns the CSV bytes.
fn run_binary(dir: &std::path::Path, cfg: &ExperimentConfig, workers: usize, tag: &str) -> Vec<u8> {
    let config_path = dir.join(format!("{tag}.json"));
    let out_path = dir.join(format!("{tag}.csv"));
    std::fs::write(&config_path, serde_json::to_string(cfg).unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_klctl"))
        .args(["--config", config_path.to_str().unwrap(), "--workers", &workers.to_string()])
        .args(["--out", out_path.to_str().unwrap()])
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "{tag} failed");
    std::fs::read(out_path).unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for name in EXPERIMENTS {
        let mut cfg = ExperimentConfig::defaults_for(name).unwrap();
        cfg.seed = SEED;
        if let Experiment::Cartpole(c) = &mut cfg.experiment {
            c.rollouts = 4;
            c.horizon = 10;
            c.samples_per_action = 300;
        }
        let reference = run_binary(dir.path(), &cfg, 1, &format!("{name}-1a"));
        let mut same = reference == run_binary(dir.path(), &cfg, 1, &format!("{name}-1b"));
        for workers in [4, 8] {
            same &= reference == run_binary(dir.path(), &cfg, workers, &format!("{name}-{workers}"));
        }
        if !same {
            mismatched.push(name);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("lq-value, lq-rollout, cartpole (4 rollouts, N=10, S=300), mdp-demo over repeat runs and workers 1/4/8: mismatched {mismatched:?}"),
    )
}

fn performance() -> Outcome {
    let Experiment::LqValue(mut cfg) = ExperimentConfig::defaults_for("lq-value").unwrap().experiment else { unreachable!() };
    cfg.sample_sizes = vec![3000];
    let report = with_workers(1, || run_lq_value(&cfg, SEED)).unwrap().unwrap();
    let per_x = report.mean_time_per_x[0];
    let ms = per_x.as_secs_f64() * 1e3;
    let soft = if ms <= 100.0 { "within" } else { "over" };
    outcome(per_x <= Duration::from_secs(1), format!("S=3000 per-x estimate {ms:.2} ms on 1 worker (hard limit 1 s; {soft} the 100 ms soft budget)"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("forward/backward desirability", forward_backward),
        ("LQR dual forms", lqr_dual),
        ("policy mean is the LQR gain", policy_gain),
        ("value function grid", value_grid),
        ("matched (Q, Sigma) pairs", matched_pairs),
        ("finite-MDP oracle", finite_mdp),
        ("Bellman consistency", bellman),
        ("cart-pole stabilization", cartpole),
        ("determinism", determinism),
        ("per-x performance", performance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let result = check();
        let tag = if result.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag}  {name}: {}", result.detail);
        failures += usize::from(!result.passed);
    }
    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
