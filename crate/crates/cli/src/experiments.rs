//! The four experiments. Each `run_*` returns a typed report; `to_csv`
//! renders it. Wall-clock figures stay in `diagnostics` so the CSV is a pure
//! function of config and seed.

use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use kl_control::cart_pole::{CartPole, CartPoleCost, CartPoleParams};
use kl_control::discrete_input::{discretized_gaussian_pmf, run_closed_loop, ClosedLoopRun, DiscreteInputSet};
use kl_control::finite_mdp::{exact_value, optimal_transition, solve_desirability, FiniteMdp};
use kl_control::lqg::{policy_stage, solve_riccati, LqgProblem};
use kl_control::path_integral::{estimate_log_desirability, sample_optimal_control_snis, SnisSettings};
use kl_control::{CostSchedule, Horizon, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{CartpoleConfig, LqRolloutConfig, LqValueConfig, MdpDemoConfig, PolicySampler};
use crate::csv::{Cell, CsvDocument};

/// Relative tolerance for treating two `(Q, Σ)` pairs as having the same `QΣ`.
const MATCHED_RATIO_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LqValueRow {
    pub x: f64,
    pub v_exact: f64,
    /// One entry per configured sample size; `None` where estimation failed.
    pub v_mc: Vec<Option<f64>>,
    /// Standard error of the estimate at the last sample size.
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LqValueReport {
    pub sample_sizes: Vec<usize>,
    pub rows: Vec<LqValueRow>,
    /// Mean wall-clock time of one per-x estimate, per sample size.
    pub mean_time_per_x: Vec<Duration>,
    pub failures: Vec<String>,
}

/// Value function at stage 0 over a grid of `x`, exact and Monte Carlo.
/// Estimate `(l, j)` (sample size `l`, grid point `j`) uses
/// `RngStream::new(seed).substream(l).substream(j)`.
pub fn run_lq_value(cfg: &LqValueConfig, seed: u64) -> Result<LqValueReport> {
    let prob = LqgProblem::scalar(cfg.a, cfg.b, cfg.q, cfg.sigma, cfg.horizon)?;
    let sol = solve_riccati(&prob)?;
    let (dynamics, noise, costs) = (prob.dynamics(), prob.noise(), prob.costs());
    let horizon = prob.horizon();
    let root = RngStream::new(seed);
    let grid = cfg.grid.points();
    let mut rows: Vec<LqValueRow> = grid
        .iter()
        .map(|&x| LqValueRow {
            x,
            v_exact: -(sol.log_prefactor[0] - 0.5 * sol.p[0][(0, 0)] * x * x),
            v_mc: Vec::with_capacity(cfg.sample_sizes.len()),
            std_error: None,
        })
        .collect();
    let mut mean_time_per_x = Vec::new();
    let mut failures = Vec::new();
    let last = cfg.sample_sizes.len() - 1;
    for (l, &samples) in cfg.sample_sizes.iter().enumerate() {
        let mut total = Duration::ZERO;
        for (j, row) in rows.iter_mut().enumerate() {
            let stream = root.substream(l as u64).substream(j as u64);
            let start = Instant::now();
            let est = estimate_log_desirability(&dynamics, &noise, &costs, horizon, 0, &[row.x], samples, stream);
            total += start.elapsed();
            match est {
                Ok(e) => {
                    row.v_mc.push(Some(-e.log_z));
                    if l == last {
                        row.std_error = Some(e.std_error_log);
                    }
                }
                Err(e) => {
                    row.v_mc.push(None);
                    failures.push(format!("x = {}, S = {samples}: {e}", row.x));
                }
            }
        }
        mean_time_per_x.push(total / grid.len() as u32);
    }
    Ok(LqValueReport { sample_sizes: cfg.sample_sizes.clone(), rows, mean_time_per_x, failures })
}

impl LqValueReport {
    pub fn to_csv(&self, cfg: &LqValueConfig, seed: u64) -> String {
        let mc_names: Vec<String> = self.sample_sizes.iter().map(|s| format!("V_mc_S{s}")).collect();
        let stderr_name = format!("stderr_S{}", self.sample_sizes[self.sample_sizes.len() - 1]);
        let mut columns = vec!["x", "V_exact"];
        columns.extend(mc_names.iter().map(String::as_str));
        columns.push(&stderr_name);
        let mut doc = CsvDocument::new("lq-value", seed, &columns);
        doc.comment(format!(
            "A = {}, B = {}, Q = {}, Sigma = {}, N = {}, k = 0",
            cfg.a, cfg.b, cfg.q, cfg.sigma, cfg.horizon
        ));
        for row in &self.rows {
            let mut cells: Vec<Cell> = vec![row.x.into(), row.v_exact.into()];
            cells.extend(row.v_mc.iter().map(|&v| Cell::from(v)));
            cells.push(row.std_error.into());
            doc.row(&cells);
        }
        doc.finish()
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .sample_sizes
            .iter()
            .zip(&self.mean_time_per_x)
            .map(|(s, t)| format!("lq-value: S = {s}: {:.3} ms per x", t.as_secs_f64() * 1e3))
            .collect();
        lines.extend(self.failures.iter().map(|f| format!("lq-value: estimation failed at {f}")));
        lines
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub q: f64,
    pub sigma: f64,
    /// Scalar gains `K_k` with mean control `-K_k x`.
    pub gains: Vec<f64>,
    pub covariances: Vec<f64>,
    /// Sampled `Var[u_k]` over the analytic closed loop; empty when disabled.
    pub sampled_control_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPath {
    pub pair: usize,
    pub sample: usize,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPairs {
    pub first: usize,
    pub second: usize,
    pub max_gain_difference: f64,
    /// Analytic covariance of `first` exceeds that of `second` at every stage.
    pub first_covariance_larger: bool,
    /// Same comparison on the sampled control variance, if sampled.
    pub first_sampled_variance_larger: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct LqRolloutReport {
    pub pairs: Vec<PairSummary>,
    pub paths: Vec<RolloutPath>,
    pub matched: Vec<MatchedPairs>,
}

/// Closed-loop paths under the optimal policy for each `(Q, Σ)` pair.
/// Path `s` of pair `p` draws from `RngStream::new(seed).substream(p).substream(s)`.
pub fn run_lq_rollout(cfg: &LqRolloutConfig, seed: u64) -> Result<LqRolloutReport> {
    let root = RngStream::new(seed);
    let mut pairs = Vec::new();
    let mut paths = Vec::new();
    for (p, &(q, sigma)) in cfg.pairs.iter().enumerate() {
        let prob = LqgProblem::scalar(cfg.a, cfg.b, q, sigma, cfg.horizon)?;
        let sol = solve_riccati(&prob)?;
        let mut gains = Vec::with_capacity(cfg.horizon);
        let mut covariances = Vec::with_capacity(cfg.horizon);
        for k in 0..cfg.horizon {
            let stage = policy_stage(&prob, &sol, k)?;
            gains.push(stage.gain[(0, 0)]);
            covariances.push(stage.covariance[(0, 0)]);
        }
        let pair_root = root.substream(p as u64);
        for s in 0..cfg.paths_per_pair {
            let stream = pair_root.substream(s as u64);
            let (states, controls) = match cfg.sampler {
                PolicySampler::Analytic => analytic_path(cfg, &gains, &covariances, stream),
                PolicySampler::Snis => snis_path(cfg, &prob, stream)
                    .with_context(|| format!("pair {p}, sample {s}"))?,
            };
            paths.push(RolloutPath { pair: p, sample: s, states, controls });
        }
        let sampled_control_variance = if cfg.variance_paths >= 2 {
            control_variance(cfg, &gains, &covariances, pair_root.substream(1 << 32))
        } else {
            Vec::new()
        };
        pairs.push(PairSummary { q, sigma, gains, covariances, sampled_control_variance });
    }
    let mut matched = Vec::new();
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let (ri, rj) = (pairs[i].q * pairs[i].sigma, pairs[j].q * pairs[j].sigma);
            if (ri - rj).abs() > MATCHED_RATIO_RTOL * ri.abs().max(rj.abs()) || pairs[i].sigma == pairs[j].sigma {
                continue;
            }
            // Order so that `first` is the pair with the larger noise.
            let (a, b) = if pairs[i].sigma > pairs[j].sigma { (i, j) } else { (j, i) };
            let (pa, pb) = (&pairs[a], &pairs[b]);
            let max_gain_difference =
                pa.gains.iter().zip(&pb.gains).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let first_covariance_larger = pa.covariances.iter().zip(&pb.covariances).all(|(x, y)| x > y);
            let first_sampled_variance_larger = (!pa.sampled_control_variance.is_empty()).then(|| {
                pa.sampled_control_variance.iter().zip(&pb.sampled_control_variance).all(|(x, y)| x > y)
            });
            matched.push(MatchedPairs {
                first: a,
                second: b,
                max_gain_difference,
                first_covariance_larger,
                first_sampled_variance_larger,
            });
        }
    }
    Ok(LqRolloutReport { pairs, paths, matched })
}

fn analytic_path(cfg: &LqRolloutConfig, gains: &[f64], covs: &[f64], stream: RngStream) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream.rng();
    let mut x = cfg.x0;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(cfg.horizon);
    for (k, g) in gains.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let u = -g * x + covs[k].sqrt() * z;
        x = cfg.a * x + cfg.b * u;
        states.push(x);
        controls.push(u);
    }
    (states, controls)
}

fn snis_path(cfg: &LqRolloutConfig, prob: &LqgProblem<f64>, stream: RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    let (dynamics, noise, costs) = (prob.dynamics(), prob.noise(), prob.costs());
    let horizon = prob.horizon();
    let settings = SnisSettings { candidates: cfg.snis_candidates, inner_samples: cfg.inner_samples };
    let mut x = cfg.x0;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        let draw = sample_optimal_control_snis(&dynamics, &noise, &costs, horizon, k, &[x], settings, stream.substream(k as u64))?;
        let u = draw.control[0];
        x = cfg.a * x + cfg.b * u;
        states.push(x);
        controls.push(u);
    }
    Ok((states, controls))
}

/// Unbiased sample variance of `u_k` per stage over `cfg.variance_paths` analytic paths.
fn control_variance(cfg: &LqRolloutConfig, gains: &[f64], covs: &[f64], stream: RngStream) -> Vec<f64> {
    let n = cfg.variance_paths as f64;
    let mut sum = vec![0.0; cfg.horizon];
    let mut sum_sq = vec![0.0; cfg.horizon];
    for s in 0..cfg.variance_paths {
        let (_, controls) = analytic_path(cfg, gains, covs, stream.substream(s as u64));
        for (k, u) in controls.into_iter().enumerate() {
            sum[k] += u;
            sum_sq[k] += u * u;
        }
    }
    sum.iter().zip(&sum_sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).collect()
}

impl LqRolloutReport {
    pub fn to_csv(&self, cfg: &LqRolloutConfig, seed: u64) -> String {
        let mut doc = CsvDocument::new("lq-rollout", seed, &["pair", "sample", "k", "x_k", "u_k"]);
        doc.comment(format!("A = {}, B = {}, N = {}, x0 = {}", cfg.a, cfg.b, cfg.horizon, cfg.x0));
        let sampler = match cfg.sampler {
            PolicySampler::Analytic => "analytic Gaussian".to_string(),
            PolicySampler::Snis => format!("SNIS, M = {}, S = {}", cfg.snis_candidates, cfg.inner_samples),
        };
        doc.comment(format!("policy sampler: {sampler}"));
        for (p, pair) in self.pairs.iter().enumerate() {
            doc.comment(format!("pair {p}: Q = {}, Sigma = {}", pair.q, pair.sigma));
        }
        for m in &self.matched {
            doc.comment(format!(
                "matched Q*Sigma pairs {} and {}: max |K diff| = {}, identical gains = {}",
                m.first,
                m.second,
                crate::csv::format_float(m.max_gain_difference),
                m.max_gain_difference <= 1e-12
            ));
            doc.comment(format!(
                "matched Q*Sigma pairs {} and {}: policy covariance of pair {} larger at every stage = {}",
                m.first, m.second, m.first, m.first_covariance_larger
            ));
            if let Some(larger) = m.first_sampled_variance_larger {
                doc.comment(format!(
                    "matched Q*Sigma pairs {} and {}: sampled control variance ({} paths) of pair {} larger at every stage = {}",
                    m.first, m.second, cfg.variance_paths, m.first, larger
                ));
            }
        }
        for path in &self.paths {
            for (k, &x) in path.states.iter().enumerate() {
                doc.row(&[
                    path.pair.into(),
                    path.sample.into(),
                    k.into(),
                    x.into(),
                    path.controls.get(k).copied().into(),
                ]);
            }
        }
        doc.finish()
    }
}

#[derive(Debug, Clone)]
pub struct CartpoleReport {
    /// One entry per rollout; `Err` holds the failure message.
    pub runs: Vec<std::result::Result<ClosedLoopRun<f64>, String>>,
    pub weights: [f64; 4],
    pub elapsed: Duration,
}

/// Mean `|θ|` over the last `stages` states of a run.
pub fn final_mean_abs_angle(run: &ClosedLoopRun<f64>, stages: usize) -> f64 {
    let states = &run.trajectory.states;
    let tail = &states[states.len().saturating_sub(stages)..];
    tail.iter().map(|s| s[2].abs()).sum::<f64>() / tail.len() as f64
}

/// System, cost, action set and reference pmf of a cart-pole config.
pub type CartpoleSetup = (CartPole<f64>, CartPoleCost<f64>, DiscreteInputSet<f64>, kl_control::NoiseModel<f64>);

pub fn cartpole_problem(cfg: &CartpoleConfig) -> Result<CartpoleSetup> {
    let params = CartPoleParams {
        cart_mass: cfg.cart_mass,
        pole_mass: cfg.pole_mass,
        length: cfg.length,
        gravity: cfg.gravity,
        dt: cfg.dt,
    };
    let system = CartPole::new(params)?;
    let actions = DiscreteInputSet::scalar(cfg.forces.iter().copied())?;
    let noise = discretized_gaussian_pmf(&actions, cfg.sigma)?;
    Ok((system, CartPoleCost { weights: cfg.weights }, actions, noise))
}

/// Receding-horizon rollouts; rollout `r` uses `RngStream::new(seed).substream(r)`.
pub fn run_cartpole(cfg: &CartpoleConfig, seed: u64) -> Result<CartpoleReport> {
    let (system, cost, actions, noise) = cartpole_problem(cfg)?;
    let horizon = Horizon::new(cfg.horizon)?;
    let root = RngStream::new(seed);
    let start = Instant::now();
    let runs = (0..cfg.rollouts)
        .map(|r| {
            run_closed_loop(&system, &noise, &cost, horizon, &actions, &cfg.x0, cfg.samples_per_action, root.substream(r as u64))
                .map_err(|e| e.to_string())
        })
        .collect();
    Ok(CartpoleReport { runs, weights: cfg.weights, elapsed: start.elapsed() })
}

impl CartpoleReport {
    pub fn stabilized_fraction(&self, stages: usize, threshold: f64) -> f64 {
        let hits = self
            .runs
            .iter()
            .filter(|r| r.as_ref().is_ok_and(|run| final_mean_abs_angle(run, stages) < threshold))
            .count();
        hits as f64 / self.runs.len() as f64
    }

    pub fn to_csv(&self, cfg: &CartpoleConfig, seed: u64) -> String {
        let cost = CartPoleCost { weights: self.weights };
        let mut doc = CsvDocument::new("cartpole", seed, &["sample", "k", "x", "x_dot", "theta", "theta_dot", "u", "stage_cost"]);
        doc.comment(format!(
            "M = {}, m = {}, l = {}, g = {}, dt = {}, sigma = {}, S = {}, N = {}",
            cfg.cart_mass, cfg.pole_mass, cfg.length, cfg.gravity, cfg.dt, cfg.sigma, cfg.samples_per_action, cfg.horizon
        ));
        doc.comment(format!("q = {:?}, x0 = {:?}, |U| = {}", cfg.weights, cfg.x0, cfg.forces.len()));
        for (r, run) in self.runs.iter().enumerate() {
            if let Err(msg) = run {
                doc.comment(format!("rollout {r} failed: {msg}"));
            }
        }
        for (r, run) in self.runs.iter().enumerate() {
            let Ok(run) = run else { continue };
            let n = run.trajectory.inputs.len();
            for (k, s) in run.trajectory.states.iter().enumerate() {
                let stage_cost = if k < n { cost.running(k, s.as_slice()) } else { cost.terminal(s.as_slice()) };
                doc.row(&[
                    r.into(),
                    k.into(),
                    s[0].into(),
                    s[1].into(),
                    s[2].into(),
                    s[3].into(),
                    run.trajectory.inputs.get(k).map(|u| u[0]).into(),
                    stage_cost.into(),
                ]);
            }
        }
        doc.finish()
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let failed = self.runs.iter().filter(|r| r.is_err()).count();
        let mut lines = vec![
            format!(
                "cartpole: {} rollouts in {:.1} s ({} failed)",
                self.runs.len(),
                self.elapsed.as_secs_f64(),
                failed
            ),
            format!(
                "cartpole: final-10-stage mean |theta| < 0.3 rad in {:.1}% of rollouts",
                100.0 * self.stabilized_fraction(10, 0.3)
            ),
        ];
        for (r, run) in self.runs.iter().enumerate() {
            if let Err(msg) = run {
                lines.push(format!("cartpole: rollout {r} failed: {msg}"));
            }
        }
        lines
    }
}

pub fn build_mdp(cfg: &MdpDemoConfig) -> Result<FiniteMdp<f64>> {
    let to_matrix = |rows: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(anyhow!("transition matrices must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    };
    let transitions = cfg.transitions.iter().map(to_matrix).collect::<Result<Vec<_>>>()?;
    let costs = cfg.costs.iter().map(|c| DVector::from_column_slice(c)).collect();
    Ok(FiniteMdp::new(transitions, costs)?)
}

#[derive(Debug, Clone)]
pub struct MdpDemoReport {
    pub log_z: Vec<DVector<f64>>,
    pub value: Vec<DVector<f64>>,
    /// `transitions[k]` holds the optimal rows `p*(·|x)` from stage `k`.
    pub transitions: Vec<DMatrix<f64>>,
}

pub fn run_mdp_demo(cfg: &MdpDemoConfig) -> Result<MdpDemoReport> {
    let mdp = build_mdp(cfg)?;
    let table = solve_desirability(&mdp)?;
    let n = mdp.states();
    let value = (0..=mdp.stages())
        .map(|k| DVector::from_iterator(n, (0..n).map(|x| exact_value(&table, k, x))))
        .collect();
    let mut transitions = Vec::with_capacity(mdp.stages());
    for k in 0..mdp.stages() {
        let mut m = DMatrix::zeros(n, n);
        for x in 0..n {
            m.set_row(x, &optimal_transition(&mdp, &table, k, x)?.transpose());
        }
        transitions.push(m);
    }
    Ok(MdpDemoReport { log_z: table.log_z, value, transitions })
}

impl MdpDemoReport {
    pub fn to_csv(&self, seed: u64) -> String {
        let mut doc = CsvDocument::new("mdp-demo", seed, &["section", "k", "state", "next_state", "value"]);
        doc.comment(format!("states = {}, N = {}", self.log_z[0].len(), self.transitions.len()));
        doc.comment("log_z: log z(k, x); value: v(k, x) = -log z(k, x); transition: p*(next | x) from stage k");
        for (section, table) in [("log_z", &self.log_z), ("value", &self.value)] {
            for (k, col) in table.iter().enumerate() {
                for (x, &v) in col.iter().enumerate() {
                    doc.row(&[section.into(), k.into(), x.into(), Cell::Empty, v.into()]);
                }
            }
        }
        for (k, m) in self.transitions.iter().enumerate() {
            for x in 0..m.nrows() {
                for y in 0..m.ncols() {
                    doc.row(&["transition".into(), k.into(), x.into(), y.into(), m[(x, y)].into()]);
                }
            }
        }
        doc.finish()
    }
}
