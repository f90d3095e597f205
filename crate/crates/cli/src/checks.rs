//! Invariant checks with measured residuals. Shared by `--selftest` and the
//! acceptance suite; instance counts are parameters so each caller picks its size.

use anyhow::Result;
use kl_control::finite_mdp::{exact_value, optimal_transition, solve_desirability, FiniteMdp};
use kl_control::lqg::{
    log_desirability_backward, log_desirability_forward, lqr_value, policy_stage, solve_riccati, LqgProblem,
    LqrValueMode, RiccatiSolution,
};
use kl_control::path_integral::{estimate_log_desirability, estimate_log_desirability_recursive};
use kl_control::{FnCost, FnDynamics, Horizon, NoiseModel, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub const FORWARD_BACKWARD_TOL: f64 = 1e-8;
pub const LQR_DUAL_TOL: f64 = 1e-8;
pub const GAIN_TOL: f64 = 1e-10;
pub const MDP_ENUMERATION_TOL: f64 = 1e-12;
/// Bellman agreement, in combined standard errors.
pub const BELLMAN_Z_TOL: f64 = 3.0;

fn spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Random instance with `n ≤ max_dim`, `N ≤ max_stages`, stable-ish `A` and
/// well-conditioned invertible `B`.
pub fn random_lqg_problem(rng: &mut impl Rng, max_dim: usize, max_stages: usize) -> LqgProblem<f64> {
    let n = rng.random_range(1..=max_dim);
    let stages = rng.random_range(1..=max_stages);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
    let b = loop {
        let b = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) + rng.random_range(-0.5..0.5));
        if b.determinant().abs() > 0.1 {
            break b;
        }
    };
    let q = (0..=stages).map(|_| spd(rng, n)).collect();
    let sigma = (0..stages).map(|_| spd(rng, n)).collect();
    LqgProblem::new(a, b, q, sigma).expect("generated instance is valid")
}

fn random_state(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Writes into one triangle of every `P_k` only, as a broken symmetric update would.
fn corrupt(sol: &mut RiccatiSolution<f64>) {
    for p in &mut sol.p {
        let n = p.nrows();
        p[(0, n - 1)] += 0.05 * (1.0 + p[(0, 0)].abs());
    }
}

/// Max |backward − forward| of `log Z` over `instances` problems, 5 random
/// `(k, x)` each. With `corrupt_p` the Riccati solution is damaged first.
pub fn forward_backward_residual(seed: u64, instances: usize, corrupt_p: bool) -> Result<f64> {
    let mut rng = RngStream::new(seed).rng();
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let prob = random_lqg_problem(&mut rng, 3, 20);
        let mut sol = solve_riccati(&prob)?;
        if corrupt_p {
            corrupt(&mut sol);
        }
        for _ in 0..5 {
            let k = rng.random_range(0..=prob.stages());
            let x = random_state(&mut rng, prob.dim());
            let b = log_desirability_backward(&prob, &sol, k, &x)?;
            let f = log_desirability_forward(&prob, k, &x)?;
            worst = worst.max((b - f).abs());
        }
    }
    Ok(worst)
}

/// Max |Riccati − batch| of the LQR value over the same kind of instances.
pub fn lqr_dual_residual(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = RngStream::new(seed).rng();
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let prob = random_lqg_problem(&mut rng, 3, 20);
        let sol = solve_riccati(&prob)?;
        for _ in 0..5 {
            let k = rng.random_range(0..=prob.stages());
            let x = random_state(&mut rng, prob.dim());
            let r = lqr_value(&prob, &sol, k, &x, LqrValueMode::Riccati)?;
            let b = lqr_value(&prob, &sol, k, &x, LqrValueMode::Batch)?;
            worst = worst.max((r - b).abs());
        }
    }
    Ok(worst)
}

/// Textbook LQR with input weight `R = Σ⁻¹`: gains `(R + BᵀPB)⁻¹ BᵀPA`.
pub fn textbook_lqr_gains(prob: &LqgProblem<f64>) -> Vec<DMatrix<f64>> {
    let (a, b) = (prob.a(), prob.b());
    let mut p = prob.q(prob.stages()).clone();
    let mut gains = vec![DMatrix::zeros(0, 0); prob.stages()];
    for k in (0..prob.stages()).rev() {
        let r = prob.sigma(k).clone().try_inverse().expect("SPD");
        let s = &r + b.transpose() * &p * b;
        let gain = s.try_inverse().expect("SPD") * b.transpose() * &p * a;
        p = prob.q(k) + a.transpose() * &p * a - a.transpose() * &p * b * &gain;
        p = (&p + p.transpose()) * 0.5;
        gains[k] = gain;
    }
    gains
}

/// Max elementwise |policy gain − textbook LQR gain|.
pub fn gain_residual(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = RngStream::new(seed).rng();
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let prob = random_lqg_problem(&mut rng, 3, 20);
        let sol = solve_riccati(&prob)?;
        for (k, reference) in textbook_lqr_gains(&prob).iter().enumerate() {
            let stage = policy_stage(&prob, &sol, k)?;
            worst = worst.max((&stage.gain - reference).amax());
        }
    }
    Ok(worst)
}

/// Random MDP; about a quarter of transitions are forbidden.
pub fn random_mdp(rng: &mut impl Rng, states: usize, stages: usize) -> FiniteMdp<f64> {
    let transitions = (0..stages)
        .map(|_| {
            let mut p = DMatrix::from_fn(states, states, |_, _| {
                if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.05..1.0) }
            });
            for mut row in p.row_iter_mut() {
                if row.sum() == 0.0 {
                    row[0] = 1.0;
                }
                let s = row.sum();
                row /= s;
            }
            p
        })
        .collect();
    let costs = (0..=stages).map(|_| DVector::from_fn(states, |_, _| rng.random_range(0.0..2.0))).collect();
    FiniteMdp::new(transitions, costs).expect("generated MDP is valid")
}

/// `z(0, x0)` by summing `P⁰(path) exp(−Σ ℓ)` over every reference path.
pub fn enumerate_desirability(mdp: &FiniteMdp<f64>, x0: usize) -> f64 {
    fn walk(mdp: &FiniteMdp<f64>, k: usize, x: usize, prob: f64, cost: f64) -> f64 {
        let cost = cost + mdp.cost(k)[x];
        if k == mdp.stages() {
            return prob * (-cost).exp();
        }
        (0..mdp.states())
            .filter(|&y| mdp.transition(k)[(x, y)] > 0.0)
            .map(|y| walk(mdp, k + 1, y, prob * mdp.transition(k)[(x, y)], cost))
            .sum()
    }
    walk(mdp, 0, x0, 1.0, 0.0)
}

/// Max |z − z_enum| at stage 0 over random MDPs.
pub fn mdp_enumeration_residual(seed: u64, instances: usize, states: usize, stages: usize) -> Result<f64> {
    let mut rng = RngStream::new(seed).rng();
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let mdp = random_mdp(&mut rng, states, stages);
        let table = solve_desirability(&mdp)?;
        for x in 0..states {
            worst = worst.max((table.log_z(0, x).exp() - enumerate_desirability(&mdp, x)).abs());
        }
    }
    Ok(worst)
}

/// Exact expected cost `E[ℓ_N + Σ_k (ℓ_k + KL(p_k(·|x) ‖ p⁰_k(·|x)))]` of a
/// Markov policy started at `x0`.
pub fn policy_cost(mdp: &FiniteMdp<f64>, policy: &[DMatrix<f64>], x0: usize) -> f64 {
    let n = mdp.states();
    let mut dist = DVector::zeros(n);
    dist[x0] = 1.0;
    let mut total = 0.0;
    for (k, pk) in policy.iter().enumerate() {
        let p0 = mdp.transition(k);
        for x in (0..n).filter(|&x| dist[x] > 0.0) {
            let kl: f64 = (0..n)
                .filter(|&y| pk[(x, y)] > 0.0)
                .map(|y| pk[(x, y)] * (pk[(x, y)] / p0[(x, y)]).ln())
                .sum();
            total += dist[x] * (mdp.cost(k)[x] + kl);
        }
        dist = pk.transpose() * dist;
    }
    total + dist.dot(mdp.cost(mdp.stages()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationOutcome {
    pub optimal_cost: f64,
    /// `v(0, x0)` from the desirability table.
    pub optimal_value: f64,
    pub cheapest_perturbed_cost: f64,
    /// Perturbed policies strictly cheaper than the optimum (beyond 1e-12).
    pub violations: usize,
}

/// Costs `perturbations` Dirichlet(50 p*) policies against `p*` on one random MDP.
pub fn mdp_perturbation_check(seed: u64, states: usize, stages: usize, perturbations: usize) -> Result<PerturbationOutcome> {
    let mut rng = RngStream::new(seed).rng();
    let mdp = random_mdp(&mut rng, states, stages);
    let table = solve_desirability(&mdp)?;
    let mut best = Vec::with_capacity(stages);
    for k in 0..stages {
        let mut p = DMatrix::zeros(states, states);
        for x in 0..states {
            p.set_row(x, &optimal_transition(&mdp, &table, k, x)?.transpose());
        }
        best.push(p);
    }
    let optimal_cost = policy_cost(&mdp, &best, 0);
    let mut cheapest = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..perturbations {
        let perturbed: Vec<DMatrix<f64>> = best
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for mut row in q.row_iter_mut() {
                    for v in row.iter_mut().filter(|v| **v > 0.0) {
                        *v = Gamma::new(50.0 * *v, 1.0).expect("positive shape").sample(&mut rng).max(1e-300);
                    }
                    let s = row.sum();
                    row /= s;
                }
                q
            })
            .collect();
        let c = policy_cost(&mdp, &perturbed, 0);
        cheapest = cheapest.min(c);
        if c < optimal_cost - 1e-12 {
            violations += 1;
        }
    }
    Ok(PerturbationOutcome {
        optimal_cost,
        optimal_value: exact_value(&table, 0, 0),
        cheapest_perturbed_cost: cheapest,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanPoint {
    pub k: usize,
    pub x: f64,
    pub direct: f64,
    pub recursive: f64,
    /// |direct − recursive| over the combined standard error.
    pub z_score: f64,
}

/// Direct vs one-step-recursive `log Z` on `x' = sin(x) + u`, `w ~ N(0, 0.4)`,
/// `ℓ_k = ½x²`, `ℓ_N = x²`, `N = 6`, at `points` states spread over [−2.5, 2.5].
pub fn bellman_points(seed: u64, points: usize, direct_samples: usize, outer: usize, inner: usize) -> Result<Vec<BellmanPoint>> {
    let dynamics = FnDynamics::new(1, 1, |x: &[f64], u: &[f64], next: &mut [f64]| next[0] = x[0].sin() + u[0]);
    let noise = NoiseModel::gaussian(DMatrix::from_element(1, 1, 0.4))?;
    let costs = FnCost::new(|_k: usize, x: &[f64]| 0.5 * x[0] * x[0], |x: &[f64]| x[0] * x[0]);
    let horizon = Horizon::new(6)?;
    let root = RngStream::new(seed);
    (0..points)
        .map(|i| {
            let x = if points == 1 { 0.0 } else { -2.5 + 5.0 * i as f64 / (points - 1) as f64 };
            let k = i % 3;
            let stream = root.substream(i as u64);
            let d = estimate_log_desirability(&dynamics, &noise, &costs, horizon, k, &[x], direct_samples, stream.substream(0))?;
            let r = estimate_log_desirability_recursive(&dynamics, &noise, &costs, horizon, k, &[x], outer, inner, stream.substream(1))?;
            let se = (d.std_error_log.powi(2) + r.std_error_log.powi(2)).sqrt();
            Ok(BellmanPoint { k, x, direct: d.log_z, recursive: r.log_z, z_score: (d.log_z - r.log_z).abs() / se })
        })
        .collect()
}
