//! KL control over a finite input set with tabulated reference noise.
//!
//! With `𝕎 ⊆ 𝕌` and `f(x, ·)` injective on `𝕎`, the unique optimal policy is
//! `Π_k*(u|x) ∝ P(w_k = u) Z(k+1, f(x, u))`. Every decision re-estimates
//! `Z(k+1, ·)` for each admissible action by Monte Carlo, scoring all
//! actions on one shared set of noise-path streams.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::path_integral::{estimate_from_log_weights, estimate_log_desirability, normalize_log_weights, select_inverse_cdf};
use crate::problem::{draw_noise_path, replay_path_cost, CostSchedule, Dynamics, Horizon, NoiseModel, RolloutScratch, Trajectory};
use crate::rng::RngStream;
use crate::scalar::{lit, neg_infinity, to_f64, Scalar};

/// Actions with reference probability below this are never scored.
pub const MIN_ACTION_PROBABILITY: f64 = 1e-300;

/// Ordered finite input set `𝕌 = {u⁽¹⁾, …, u⁽ʳ⁾}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteInputSet<T> {
    actions: Vec<Vec<T>>,
}

impl<T: Scalar> DiscreteInputSet<T> {
    pub fn new(actions: Vec<Vec<T>>) -> Result<Self> {
        let Some(first) = actions.first() else {
            return Err(Error::invalid("input set must be nonempty"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("actions must have positive dimension"));
        }
        for (i, a) in actions.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::Dimension { what: "action", expected: dim, found: a.len() });
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("actions must be finite"));
            }
            if actions[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate action at index {i}")));
            }
        }
        Ok(Self { actions })
    }

    /// One-dimensional actions.
    pub fn scalar(values: impl IntoIterator<Item = T>) -> Result<Self> {
        Self::new(values.into_iter().map(|v| vec![v]).collect())
    }

    pub fn actions(&self) -> &[Vec<T>] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.actions[0].len()
    }
}

/// `Π_k*(·|x)` over the ordered action list.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteActionPolicy<T> {
    pub probabilities: Vec<T>,
    /// Estimated `log Z(k+1, f(x, u))` per action; `-inf` for actions that
    /// were not scored.
    pub log_desirability: Vec<T>,
}

/// Reference pmf `P(w = v) ∝ exp(-|v|² / (2σ²))` over `support`.
pub fn discretized_gaussian_pmf<T: Scalar>(support: &DiscreteInputSet<T>, sigma: T) -> Result<NoiseModel<T>> {
    if !(sigma.is_finite() && sigma > T::zero()) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let denom = lit::<T>(2.0) * sigma * sigma;
    let log_weights = support
        .actions()
        .iter()
        .map(|w| -w.iter().fold(T::zero(), |s, &v| s + v * v) / denom)
        .collect();
    NoiseModel::discrete(support.actions().to_vec(), log_weights)
}

fn check_support<T: Scalar>(noise: &NoiseModel<T>, actions: &DiscreteInputSet<T>) -> Result<()> {
    let support = noise
        .support()
        .ok_or_else(|| Error::invalid("discrete-input control requires a discrete noise model"))?;
    if noise.dim() != actions.dim() {
        return Err(Error::Dimension { what: "noise", expected: actions.dim(), found: noise.dim() });
    }
    if let Some(w) = support.iter().find(|w| !actions.actions().contains(w)) {
        return Err(Error::invalid(format!("noise support point {w:?} is not an admissible action")));
    }
    Ok(())
}

/// Optimal action probabilities at `(k, x)`, `k < N`. `samples` rollouts per
/// action estimate `Z(k+1, f(x, u))`, all actions sharing `stream`.
pub fn optimal_action_probs<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    actions: &DiscreteInputSet<T>,
    k: usize,
    x: &[T],
    samples: usize,
    stream: RngStream,
) -> Result<DiscreteActionPolicy<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    check_support(noise, actions)?;
    if k >= horizon.stages() {
        return Err(Error::invalid("no decision at the terminal stage"));
    }
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if x.len() != dynamics.state_dim() {
        return Err(Error::Dimension { what: "state", expected: dynamics.state_dim(), found: x.len() });
    }
    let min_log = lit::<T>(MIN_ACTION_PROBABILITY.ln());
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    // Reference log-probability and successor state of every scored action.
    let starts: Vec<Option<(T, Vec<T>)>> = actions
        .actions()
        .iter()
        .map(|u| {
            let log_pmf = noise.log_density(k, u);
            if !(log_pmf >= min_log) {
                return None;
            }
            let mut next = vec![T::zero(); n];
            dynamics.step(x, u, &mut next);
            next.iter().all(|v| v.is_finite()).then_some((log_pmf, next))
        })
        .collect();
    let log_z: Vec<T> = if k + 1 == horizon.stages() {
        starts
            .par_iter()
            .map(|s| match s {
                Some((_, next)) => estimate_log_desirability(dynamics, noise, costs, horizon, k + 1, next, samples, stream)
                    .map_or_else(|_| neg_infinity(), |e| e.log_z),
                None => neg_infinity(),
            })
            .collect()
    } else {
        // Common random numbers: sample path `i` is drawn once and replayed
        // from every successor, exactly as separate estimates on `stream` would.
        let len = (horizon.stages() - k - 1) * m;
        let per_sample: Vec<Vec<T>> = (0..samples)
            .into_par_iter()
            .map_init(
                || (RolloutScratch::new(n, m), vec![T::zero(); len]),
                |(scratch, buf), i| {
                    draw_noise_path(noise, k + 1, horizon, stream.substream(i as u64), buf);
                    starts
                        .iter()
                        .map(|s| match s {
                            Some((_, next)) => replay_path_cost(dynamics, costs, next, k + 1, horizon, buf, scratch)
                                .map_or_else(|_| neg_infinity(), |c| -c),
                            None => neg_infinity(),
                        })
                        .collect()
                },
            )
            .collect();
        (0..starts.len())
            .map(|a| {
                if starts[a].is_none() {
                    return neg_infinity();
                }
                let weights: Vec<T> = per_sample.iter().map(|row| row[a]).collect();
                estimate_from_log_weights(&weights).map_or_else(|_| neg_infinity(), |e| e.log_z)
            })
            .collect()
    };
    let scored: Vec<(T, T)> = starts
        .iter()
        .zip(log_z)
        .map(|(s, lz)| match s {
            Some((log_pmf, _)) => (*log_pmf + lz, lz),
            None => (neg_infinity(), neg_infinity()),
        })
        .collect();
    let (log_weights, log_desirability): (Vec<T>, Vec<T>) = scored.into_iter().unzip();
    let probabilities = normalize_log_weights(&log_weights)
        .map_err(|_| Error::EstimationFailed(format!("every action weight vanished at stage {k}")))?;
    Ok(DiscreteActionPolicy { probabilities, log_desirability })
}

/// Closed-loop run: states, applied actions, and the policy used at each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun<T: Scalar> {
    pub trajectory: Trajectory<T>,
    pub action_indices: Vec<usize>,
    pub policies: Vec<DiscreteActionPolicy<T>>,
}

/// Applies `Π_k*` at every stage `k = 0..N-1` from `x0`, sampling each
/// action by inverse-CDF over the declared action order. Stage `k` uses
/// `stream.substream(2k)` for its estimates and `stream.substream(2k+1)`
/// for its action draw.
pub fn run_closed_loop<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    actions: &DiscreteInputSet<T>,
    x0: &[T],
    samples: usize,
    stream: RngStream,
) -> Result<ClosedLoopRun<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    if x0.len() != dynamics.state_dim() {
        return Err(Error::Dimension { what: "initial state", expected: dynamics.state_dim(), found: x0.len() });
    }
    let n_stages = horizon.stages();
    let mut x = x0.to_vec();
    let mut next = vec![T::zero(); x.len()];
    let mut states = vec![DVector::from_column_slice(x0)];
    let mut inputs = Vec::with_capacity(n_stages);
    let mut action_indices = Vec::with_capacity(n_stages);
    let mut policies = Vec::with_capacity(n_stages);
    for k in 0..n_stages {
        let policy = optimal_action_probs(
            dynamics,
            noise,
            costs,
            horizon,
            actions,
            k,
            &x,
            samples,
            stream.substream(2 * k as u64),
        )
        .map_err(|e| match e {
            Error::EstimationFailed(msg) => Error::EstimationFailed(format!("closed loop stage {k}: {msg}")),
            other => other,
        })?;
        let u: f64 = stream.substream(2 * k as u64 + 1).rng().random();
        let idx = select_inverse_cdf(&policy.probabilities, u);
        let action = &actions.actions()[idx];
        dynamics.step(&x, action, &mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { stage: k + 1 });
        }
        std::mem::swap(&mut x, &mut next);
        states.push(DVector::from_column_slice(&x));
        inputs.push(DVector::from_column_slice(action));
        action_indices.push(idx);
        policies.push(policy);
    }
    Ok(ClosedLoopRun { trajectory: Trajectory { start_stage: 0, states, inputs }, action_indices, policies })
}

/// Most probable action; ties resolve to the earliest index.
pub fn argmax_action<T: Scalar>(policy: &DiscreteActionPolicy<T>) -> usize {
    let mut best = 0;
    for (i, &p) in policy.probabilities.iter().enumerate() {
        if to_f64(p) > to_f64(policy.probabilities[best]) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{FnCost, FnDynamics, ZeroCost};

    fn force_grid() -> DiscreteInputSet<f64> {
        DiscreteInputSet::scalar((-10..=10).map(|i| 2.0 * i as f64)).unwrap()
    }

    #[test]
    fn input_set_validation() {
        assert!(DiscreteInputSet::<f64>::new(vec![]).is_err());
        assert!(DiscreteInputSet::scalar([1.0, 2.0, 1.0]).is_err());
        assert!(DiscreteInputSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(force_grid().len(), 21);
    }

    #[test]
    fn pmf_properties() {
        let noise = discretized_gaussian_pmf(&force_grid(), 5.0).unwrap();
        let p = noise.discrete_stage(0).unwrap().log_probs().to_vec();
        let total: f64 = p.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..21 {
            assert_eq!(p[i], p[20 - i]);
        }
        let ratio = (p[10] - p[11]).exp();
        assert!((ratio - 0.08f64.exp()).abs() < 1e-12);
        assert!((ratio - 1.0832870676749586).abs() < 1e-12);
        assert!(discretized_gaussian_pmf(&force_grid(), 0.0).is_err());
        assert!(discretized_gaussian_pmf(&force_grid(), -1.0).is_err());
    }

    fn shift_dynamics() -> FnDynamics<impl Fn(&[f64], &[f64], &mut [f64]) + Sync> {
        FnDynamics::new(1, 1, |x: &[f64], u: &[f64], next: &mut [f64]| next[0] = 0.5 * x[0] + u[0])
    }

    #[test]
    fn zero_cost_returns_noise_pmf() {
        let actions = force_grid();
        let noise = discretized_gaussian_pmf(&actions, 5.0).unwrap();
        let h = Horizon::new(6).unwrap();
        let policy = optimal_action_probs(&shift_dynamics(), &noise, &ZeroCost, h, &actions, 0, &[1.0], 50, RngStream::new(4)).unwrap();
        let pmf = noise.discrete_stage(0).unwrap().log_probs();
        for (p, lp) in policy.probabilities.iter().zip(pmf) {
            assert!((p - lp.exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn actions_outside_support_get_zero() {
        let actions = DiscreteInputSet::scalar([-1.0, 0.0, 1.0, 5.0]).unwrap();
        let noise = NoiseModel::discrete(vec![vec![-1.0], vec![0.0], vec![1.0]], vec![0.0; 3]).unwrap();
        let costs = FnCost::new(|_k: usize, x: &[f64]| x[0].abs(), |x: &[f64]| x[0].abs());
        let h = Horizon::new(4).unwrap();
        let policy = optimal_action_probs(&shift_dynamics(), &noise, &costs, h, &actions, 1, &[0.3], 100, RngStream::new(0)).unwrap();
        assert_eq!(policy.probabilities[3], 0.0);
        assert_eq!(policy.log_desirability[3], f64::NEG_INFINITY);
        assert!((policy.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn support_must_be_admissible() {
        let actions = DiscreteInputSet::scalar([0.0, 1.0]).unwrap();
        let noise = NoiseModel::discrete(vec![vec![0.0], vec![2.0]], vec![0.0; 2]).unwrap();
        let h = Horizon::new(2).unwrap();
        assert!(optimal_action_probs(&shift_dynamics(), &noise, &ZeroCost, h, &actions, 0, &[0.0], 1, RngStream::new(0)).is_err());
    }

    #[test]
    fn last_decision_matches_hand_normalization() {
        let actions = DiscreteInputSet::scalar([-1.0, 2.0]).unwrap();
        let noise = NoiseModel::discrete(actions.actions().to_vec(), vec![(0.3f64).ln(), (0.7f64).ln()]).unwrap();
        let costs = FnCost::new(|_k: usize, x: &[f64]| x[0] * x[0], |x: &[f64]| 2.0 * x[0] * x[0]);
        let h = Horizon::new(3).unwrap();
        let x = 0.4;
        let policy = optimal_action_probs(&shift_dynamics(), &noise, &costs, h, &actions, 2, &[x], 1, RngStream::new(9)).unwrap();
        let w1 = 0.3 * (-2.0 * (0.5 * x - 1.0f64).powi(2)).exp();
        let w2 = 0.7 * (-2.0 * (0.5 * x + 2.0f64).powi(2)).exp();
        assert!((policy.probabilities[0] - w1 / (w1 + w2)).abs() < 1e-14);
        assert!((policy.probabilities[1] - w2 / (w1 + w2)).abs() < 1e-14);
    }

    #[test]
    fn closed_loop_is_deterministic_and_consistent() {
        let actions = DiscreteInputSet::scalar([-1.0, 0.0, 1.0]).unwrap();
        let noise = discretized_gaussian_pmf(&actions, 1.0).unwrap();
        let costs = FnCost::new(|_k: usize, x: &[f64]| x[0].abs(), |x: &[f64]| x[0].abs());
        let h = Horizon::new(8).unwrap();
        let run = || run_closed_loop(&shift_dynamics(), &noise, &costs, h, &actions, &[3.0], 64, RngStream::new(12)).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.trajectory.states.len(), 9);
        for k in 0..8 {
            let u = &a.trajectory.inputs[k];
            assert_eq!(u[0], actions.actions()[a.action_indices[k]][0]);
            let expect = 0.5 * a.trajectory.states[k][0] + u[0];
            assert_eq!(a.trajectory.states[k + 1][0], expect);
            assert!(a.policies[k].probabilities[a.action_indices[k]] > 0.0);
        }
    }

    #[test]
    fn shared_noise_paths_match_separate_estimates() {
        // Exploding cost far from the origin makes some paths diverge.
        let dynamics = FnDynamics::new(1, 1, |x: &[f64], u: &[f64], next: &mut [f64]| next[0] = 1.3 * x[0] + 0.2 * u[0]);
        let costs = FnCost::new(
            |_k: usize, x: &[f64]| if x[0].abs() > 40.0 { f64::INFINITY } else { x[0] * x[0] * 0.1 },
            |x: &[f64]| x[0].abs(),
        );
        let actions = force_grid();
        let noise = discretized_gaussian_pmf(&actions, 5.0).unwrap();
        let h = Horizon::new(8).unwrap();
        let stream = RngStream::new(77);
        for (k, x) in [(0, 0.5), (3, -4.0), (6, 2.0), (7, 1.0)] {
            let policy = optimal_action_probs(&dynamics, &noise, &costs, h, &actions, k, &[x], 300, stream).unwrap();
            for (a, u) in actions.actions().iter().enumerate() {
                let mut next = [0.0];
                dynamics.step(&[x], u, &mut next);
                let separate = estimate_log_desirability(&dynamics, &noise, &costs, h, k + 1, &next, 300, stream)
                    .map_or(f64::NEG_INFINITY, |e| e.log_z);
                assert_eq!(policy.log_desirability[a].to_bits(), separate.to_bits(), "k={k} a={a}");
            }
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let p = DiscreteActionPolicy { probabilities: vec![0.25, 0.5, 0.25], log_desirability: vec![0.0; 3] };
        assert_eq!(argmax_action(&p), 1);
        let p = DiscreteActionPolicy { probabilities: vec![0.5, 0.5], log_desirability: vec![0.0; 2] };
        assert_eq!(argmax_action(&p), 0);
    }
}
