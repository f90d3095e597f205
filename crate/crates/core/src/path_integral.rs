//! Monte-Carlo evaluation of the path-integral representation
//!
//! `Z(k, x) = E[ exp(-Σ_{s=k}^{N} ℓ_s(x̄_s)) | x̄_k = x ]`
//!
//! over noise-driven rollouts, and self-normalized importance sampling from
//! the optimal policy `π_k*(u|x) ∝ ρ_{w_k}(u) Z(k+1, f(x, u))`.
//!
//! Sample `i` of an estimate always uses `stream.substream(i)`, and results
//! are reduced in index order, so estimates are bit-identical for any
//! number of rayon workers.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::{sample_path_cost, CostSchedule, Dynamics, Horizon, NoiseModel, RolloutScratch};
use crate::rng::RngStream;
use crate::scalar::{infinity, lit, log_sum_exp, neg_infinity, Scalar};

/// Estimated `log Z(k, x)` with diagnostics. `V(k, x) = -log_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesirabilityEstimate<T> {
    pub log_z: T,
    pub sample_count: usize,
    /// `max - min` over the finite per-sample log-weights.
    pub log_weight_spread: T,
    /// Delta-method standard error of `log_z`.
    pub std_error_log: T,
}

impl<T: Scalar> DesirabilityEstimate<T> {
    pub fn value(&self) -> T {
        -self.log_z
    }

    /// Exact estimate (no sampling error), used at the terminal stage.
    pub fn exact(log_z: T, sample_count: usize) -> Self {
        Self { log_z, sample_count, log_weight_spread: T::zero(), std_error_log: T::zero() }
    }
}

/// Log-mean-exp of per-sample log-weights with delta-method error bars.
///
/// `-inf` entries are zero weights. Fails when every weight is zero.
pub fn estimate_from_log_weights<T: Scalar>(log_weights: &[T]) -> Result<DesirabilityEstimate<T>> {
    let count = log_weights.len();
    if count == 0 {
        return Err(Error::invalid("at least one sample required"));
    }
    let (mut lo, mut hi) = (infinity::<T>(), neg_infinity::<T>());
    for &a in log_weights {
        if a.is_finite() {
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    if !hi.is_finite() {
        return Err(Error::EstimationFailed(format!("all {count} sample weights vanished")));
    }
    let n = lit::<T>(count as f64);
    let log_z = log_sum_exp(log_weights) - n.ln();
    let std_error_log = if count < 2 {
        infinity()
    } else {
        // Weights rescaled by exp(-hi) so the largest is exactly one.
        let scaled: Vec<T> = log_weights.iter().map(|&a| (a - hi).exp()).collect();
        let mean = scaled.iter().fold(T::zero(), |s, &w| s + w) / n;
        let var = scaled.iter().fold(T::zero(), |s, &w| s + (w - mean) * (w - mean))
            / lit::<T>((count - 1) as f64);
        (var / n).sqrt() / mean
    };
    Ok(DesirabilityEstimate { log_z, sample_count: count, log_weight_spread: hi - lo, std_error_log })
}

fn check_dims<T: Scalar, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    x: &[T],
    k: usize,
    horizon: Horizon,
) -> Result<()> {
    if k > horizon.stages() {
        return Err(Error::invalid(format!("stage {k} beyond horizon {}", horizon.stages())));
    }
    if x.len() != dynamics.state_dim() {
        return Err(Error::Dimension { what: "state", expected: dynamics.state_dim(), found: x.len() });
    }
    if noise.dim() != dynamics.input_dim() {
        return Err(Error::Dimension { what: "noise", expected: dynamics.input_dim(), found: noise.dim() });
    }
    Ok(())
}

/// Per-sample log-weights `-Σ_{s=k}^{N} ℓ_s(x̄_s)`; diverged or
/// infinite-cost paths contribute `-inf`.
pub fn sample_log_weights<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    k: usize,
    x: &[T],
    samples: usize,
    stream: RngStream,
) -> Result<Vec<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    check_dims(dynamics, noise, x, k, horizon)?;
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    Ok((0..samples)
        .into_par_iter()
        .map_init(
            || RolloutScratch::new(n, m),
            |scratch, i| {
                sample_path_cost(dynamics, noise, costs, x, k, horizon, stream.substream(i as u64), scratch)
                    .map(|c| -c)
                    .unwrap_or_else(|_| neg_infinity())
            },
        )
        .collect())
}

/// `log Z(k, x)` from `samples` independent noise-driven rollouts.
///
/// At `k = N` the value `-ℓ_N(x)` is returned exactly without sampling.
pub fn estimate_log_desirability<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    k: usize,
    x: &[T],
    samples: usize,
    stream: RngStream,
) -> Result<DesirabilityEstimate<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    check_dims(dynamics, noise, x, k, horizon)?;
    if k == horizon.stages() {
        let terminal = costs.terminal(x);
        if !terminal.is_finite() {
            return Err(Error::EstimationFailed("terminal cost is not finite".into()));
        }
        return Ok(DesirabilityEstimate::exact(-terminal, samples));
    }
    let weights = sample_log_weights(dynamics, noise, costs, horizon, k, x, samples, stream)?;
    estimate_from_log_weights(&weights)
}

/// Two-level estimate of `log Z(k, x)` through one step of the linear
/// backward recursion: `-ℓ_k(x) + log mean_j Ẑ(k+1, f(x, w_j))` with
/// `outer` draws `w_j ~ ρ_{w_k}` and an independent `inner`-sample estimate
/// per draw. Agrees with [`estimate_log_desirability`] in expectation.
pub fn estimate_log_desirability_recursive<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    k: usize,
    x: &[T],
    outer: usize,
    inner: usize,
    stream: RngStream,
) -> Result<DesirabilityEstimate<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    check_dims(dynamics, noise, x, k, horizon)?;
    if k >= horizon.stages() {
        return Err(Error::invalid("recursive estimate needs k < N"));
    }
    if outer == 0 || inner == 0 {
        return Err(Error::invalid("sample counts must be at least 1"));
    }
    let running = costs.running(k, x);
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    let draws = stream.substream(0);
    let inner_root = stream.substream(1);
    let inner_logs: Vec<T> = (0..outer)
        .into_par_iter()
        .map(|j| {
            let mut w = vec![T::zero(); m];
            let mut next = vec![T::zero(); n];
            noise.sample_into(k, &mut draws.substream(j as u64).rng(), &mut w);
            dynamics.step(x, &w, &mut next);
            estimate_log_desirability(
                dynamics,
                noise,
                costs,
                horizon,
                k + 1,
                &next,
                inner,
                inner_root.substream(j as u64),
            )
            .map(|e| e.log_z)
            .unwrap_or_else(|_| neg_infinity())
        })
        .collect();
    let mut est = estimate_from_log_weights(&inner_logs)?;
    est.log_z -= running;
    est.sample_count = outer * inner;
    Ok(est)
}

/// Normalizes log-weights onto the simplex. Fails when all are `-inf`.
pub fn normalize_log_weights<T: Scalar>(log_weights: &[T]) -> Result<Vec<T>> {
    let norm = log_sum_exp(log_weights);
    if !norm.is_finite() {
        return Err(Error::EstimationFailed("all candidate weights are zero".into()));
    }
    Ok(log_weights.iter().map(|&a| (a - norm).exp()).collect())
}

/// Index selected by inverse-CDF at `u ∈ [0, 1)`, scanning in declared
/// order with compensated cumulative sums. Zero-weight entries are never
/// selected.
pub fn select_inverse_cdf<T: Scalar>(weights: &[T], u: f64) -> usize {
    let cdf = crate::problem::compensated_cumsum(weights.iter().map(|&w| crate::scalar::to_f64(w)));
    let total = *cdf.last().expect("nonempty weights");
    let target = u * total;
    let idx = cdf.partition_point(|&c| c <= target);
    if idx < weights.len() {
        return idx;
    }
    // u rounded onto the total; fall back to the last positive weight.
    weights.iter().rposition(|&w| w > T::zero()).unwrap_or(weights.len() - 1)
}

/// Effective sample size `1 / Σ w_j²` of normalized weights.
pub fn effective_sample_size<T: Scalar>(weights: &[T]) -> T {
    T::one() / weights.iter().fold(T::zero(), |s, &w| s + w * w)
}

/// One control drawn (approximately) from `π_k*(·|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample<T: Scalar> {
    pub control: DVector<T>,
    pub candidate_count: usize,
    pub selected: usize,
    pub normalized_weights: Vec<T>,
    pub effective_sample_size: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnisSettings {
    /// Candidates `M` drawn from the noise law per decision.
    pub candidates: usize,
    /// Rollouts per candidate for `Ẑ(k+1, ·)`.
    pub inner_samples: usize,
}

impl Default for SnisSettings {
    fn default() -> Self {
        Self { candidates: 64, inner_samples: 256 }
    }
}

/// Self-normalized importance sampling from the optimal continuous-input
/// policy. Candidates `u_j ~ ρ_{w_k}` are weighted by `Ẑ(k+1, f(x, u_j))`;
/// every candidate is scored on the same inner rollout streams.
pub fn sample_optimal_control_snis<T, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    horizon: Horizon,
    k: usize,
    x: &[T],
    settings: SnisSettings,
    stream: RngStream,
) -> Result<PolicySample<T>>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    check_dims(dynamics, noise, x, k, horizon)?;
    if settings.candidates < 2 {
        return Err(Error::invalid("SNIS needs at least two candidates"));
    }
    if settings.inner_samples == 0 {
        return Err(Error::invalid("inner sample count must be at least 1"));
    }
    if noise.gaussian_stage(k).is_none() {
        return Err(Error::invalid("SNIS policy sampling requires a continuous noise model"));
    }
    if k >= horizon.stages() {
        return Err(Error::invalid("no decision at the terminal stage"));
    }
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    let mut draw_rng = stream.substream(0).rng();
    let candidates: Vec<Vec<T>> = (0..settings.candidates)
        .map(|_| {
            let mut u = vec![T::zero(); m];
            noise.sample_into(k, &mut draw_rng, &mut u);
            u
        })
        .collect();
    let common = stream.substream(1);
    let log_weights: Vec<T> = candidates
        .par_iter()
        .map(|u| {
            let mut next = vec![T::zero(); n];
            dynamics.step(x, u, &mut next);
            if !next.iter().all(|v| v.is_finite()) {
                return neg_infinity();
            }
            estimate_log_desirability(dynamics, noise, costs, horizon, k + 1, &next, settings.inner_samples, common)
                .map(|e| e.log_z)
                .unwrap_or_else(|_| neg_infinity())
        })
        .collect();
    let weights = normalize_log_weights(&log_weights)?;
    let u: f64 = stream.substream(2).rng().random();
    let selected = select_inverse_cdf(&weights, u);
    Ok(PolicySample {
        control: DVector::from_column_slice(&candidates[selected]),
        candidate_count: settings.candidates,
        selected,
        effective_sample_size: effective_sample_size(&weights),
        normalized_weights: weights,
    })
}
