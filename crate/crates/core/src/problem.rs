//! Problem objects shared by every solver: horizon, dynamics, reference
//! noise law, stage costs, and noise-driven rollouts.
//!
//! The dynamics `x_{k+1} = f(x_k, u_k)` are deterministic given the input.
//! The reference process substitutes the noise for the input,
//! `x̄_{k+1} = f(x̄_k, w_k)`. For the path-integral results to hold, `f(x, ·)`
//! must be a bijection with nonvanishing Jacobian determinant on continuous
//! input spaces; that is the caller's obligation and is not checked.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{RngStream, StreamRng};
use crate::scalar::{lit, neg_infinity, Scalar};

/// Number of stages `N`; stage indices run `0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::invalid("horizon must have at least one stage"));
        }
        Ok(Self(stages))
    }

    #[inline]
    pub fn stages(self) -> usize {
        self.0
    }
}

/// Discrete-time dynamics `x' = f(x, u)` on `R^n × R^m`.
pub trait Dynamics<T: Scalar>: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Writes `f(x, u)` into `next`. Slices have lengths `n`, `m`, `n`.
    fn step(&self, x: &[T], u: &[T], next: &mut [T]);

    fn step_vec(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let mut next = DVector::zeros(self.state_dim());
        self.step(x.as_slice(), u.as_slice(), next.as_mut_slice());
        next
    }
}

/// Dynamics from a closure.
pub struct FnDynamics<F> {
    n: usize,
    m: usize,
    f: F,
}

impl<F> FnDynamics<F> {
    pub fn new(state_dim: usize, input_dim: usize, f: F) -> Self {
        Self { n: state_dim, m: input_dim, f }
    }
}

impl<T: Scalar, F> Dynamics<T> for FnDynamics<F>
where
    F: Fn(&[T], &[T], &mut [T]) + Sync,
{
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn step(&self, x: &[T], u: &[T], next: &mut [T]) {
        (self.f)(x, u, next)
    }
}

/// `x' = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearDynamics<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

impl<T: Scalar> LinearDynamics<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        linalg::check_square(&a, n, "A")?;
        if b.nrows() != n {
            return Err(Error::Dimension { what: "B rows", expected: n, found: b.nrows() });
        }
        Ok(Self { a, b })
    }
}

impl<T: Scalar> Dynamics<T> for LinearDynamics<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn step(&self, x: &[T], u: &[T], next: &mut [T]) {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        for (i, out) in next.iter_mut().enumerate().take(n) {
            let mut acc = T::zero();
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            for j in 0..m {
                acc += self.b[(i, j)] * u[j];
            }
            *out = acc;
        }
    }
}

/// Stage costs `ℓ_0..ℓ_{N-1}` (running) and `ℓ_N` (terminal).
pub trait CostSchedule<T: Scalar>: Sync {
    fn running(&self, stage: usize, x: &[T]) -> T;
    fn terminal(&self, x: &[T]) -> T;

    /// `ℓ_stage`, dispatching to the terminal cost when `stage == horizon`.
    #[inline]
    fn stage_cost(&self, stage: usize, horizon: Horizon, x: &[T]) -> T {
        if stage == horizon.stages() {
            self.terminal(x)
        } else {
            self.running(stage, x)
        }
    }
}

/// Costs from closures.
pub struct FnCost<R, F> {
    running: R,
    terminal: F,
}

impl<R, F> FnCost<R, F> {
    pub fn new(running: R, terminal: F) -> Self {
        Self { running, terminal }
    }
}

impl<T: Scalar, R, F> CostSchedule<T> for FnCost<R, F>
where
    R: Fn(usize, &[T]) -> T + Sync,
    F: Fn(&[T]) -> T + Sync,
{
    fn running(&self, stage: usize, x: &[T]) -> T {
        (self.running)(stage, x)
    }
    fn terminal(&self, x: &[T]) -> T {
        (self.terminal)(x)
    }
}

/// `ℓ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCost;

impl<T: Scalar> CostSchedule<T> for ZeroCost {
    fn running(&self, _: usize, _: &[T]) -> T {
        T::zero()
    }
    fn terminal(&self, _: &[T]) -> T {
        T::zero()
    }
}

/// `ℓ_k(x) = ½ xᵀ Q_k x` with `Q_0..Q_N`.
#[derive(Debug, Clone)]
pub struct QuadraticCost<T: Scalar> {
    weights: Vec<DMatrix<T>>,
}

impl<T: Scalar> QuadraticCost<T> {
    /// One weight per stage including the terminal one.
    pub fn new(weights: Vec<DMatrix<T>>) -> Self {
        Self { weights }
    }

    fn eval(q: &DMatrix<T>, x: &[T]) -> T {
        let n = x.len();
        let mut acc = T::zero();
        for i in 0..n {
            let mut row = T::zero();
            for j in 0..n {
                row += q[(i, j)] * x[j];
            }
            acc += x[i] * row;
        }
        acc * lit::<T>(0.5)
    }
}

impl<T: Scalar> CostSchedule<T> for QuadraticCost<T> {
    fn running(&self, stage: usize, x: &[T]) -> T {
        Self::eval(&self.weights[stage], x)
    }
    fn terminal(&self, x: &[T]) -> T {
        Self::eval(self.weights.last().expect("at least one weight"), x)
    }
}

/// Zero-mean Gaussian stage law `N(0, Σ_k)` with its cached square root.
#[derive(Debug, Clone)]
pub struct GaussianStage<T: Scalar> {
    covariance: DMatrix<T>,
    chol: Cholesky<T, Dyn>,
    sqrt: DMatrix<T>,
    log_norm: T,
}

impl<T: Scalar> GaussianStage<T> {
    pub fn new(covariance: DMatrix<T>, stage: Option<usize>) -> Result<Self> {
        let m = covariance.nrows();
        linalg::check_square(&covariance, m, "noise covariance")?;
        let chol = linalg::check_spd(&covariance, "noise covariance", stage)?;
        let sqrt = chol.l();
        let log_norm = lit::<T>(-0.5)
            * (lit::<T>(m as f64) * (lit::<T>(2.0) * T::pi()).ln() + linalg::log_det(&chol));
        Ok(Self { covariance, chol, sqrt, log_norm })
    }

    pub fn covariance(&self) -> &DMatrix<T> {
        &self.covariance
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = Σ`.
    pub fn sqrt(&self) -> &DMatrix<T> {
        &self.sqrt
    }

    pub fn cholesky(&self) -> &Cholesky<T, Dyn> {
        &self.chol
    }

    pub fn log_density(&self, w: &[T]) -> T {
        let solved = self.chol.solve(&DVector::from_column_slice(w));
        let quad = solved.iter().zip(w).fold(T::zero(), |a, (s, v)| a + *s * *v);
        self.log_norm - lit::<T>(0.5) * quad
    }

    #[inline]
    fn sample_into(&self, rng: &mut StreamRng, out: &mut [T]) {
        let m = out.len();
        // Lower-triangular product, filled back to front so `out` can hold z.
        for z in out.iter_mut() {
            *z = lit(rng.sample::<f64, _>(StandardNormal));
        }
        for i in (0..m).rev() {
            let mut acc = T::zero();
            for j in 0..=i {
                acc += self.sqrt[(i, j)] * out[j];
            }
            out[i] = acc;
        }
    }
}

/// Probability table over a shared finite support.
#[derive(Debug, Clone)]
pub struct DiscreteStage<T: Scalar> {
    log_probs: Vec<T>,
    cdf: Vec<f64>,
}

impl<T: Scalar> DiscreteStage<T> {
    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }

    #[inline]
    fn sample_index(&self, rng: &mut StreamRng) -> usize {
        let u: f64 = rng.random();
        let last = self.cdf.len() - 1;
        // Same index as the binary search; the branch-free count is much
        // cheaper on short tables, where the search mispredicts.
        if self.cdf.len() <= 64 {
            self.cdf.iter().map(|&c| usize::from(c <= u)).sum::<usize>().min(last)
        } else {
            self.cdf.partition_point(|&c| c <= u).min(last)
        }
    }
}

/// Reference noise law `ρ_{w_k}`, either continuous Gaussian or tabulated
/// over a finite support. A single stage entry applies to every stage.
#[derive(Debug, Clone)]
pub enum NoiseModel<T: Scalar> {
    Gaussian { stages: Vec<GaussianStage<T>> },
    Discrete { support: Vec<Vec<T>>, stages: Vec<DiscreteStage<T>> },
}

/// Neumaier-compensated running sum in `f64`.
pub(crate) fn compensated_cumsum(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    values
        .into_iter()
        .map(|v| {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
            sum + comp
        })
        .collect()
}

impl<T: Scalar> NoiseModel<T> {
    /// Stationary `N(0, Σ)`.
    pub fn gaussian(covariance: DMatrix<T>) -> Result<Self> {
        Ok(Self::Gaussian { stages: vec![GaussianStage::new(covariance, None)?] })
    }

    /// Per-stage `N(0, Σ_k)`.
    pub fn gaussian_staged(covariances: Vec<DMatrix<T>>) -> Result<Self> {
        if covariances.is_empty() {
            return Err(Error::invalid("at least one noise covariance required"));
        }
        let dim = covariances[0].nrows();
        let stages = covariances
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                linalg::check_square(&c, dim, "noise covariance")?;
                GaussianStage::new(c, Some(k))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Gaussian { stages })
    }

    /// Stationary pmf from unnormalized log weights over `support`.
    pub fn discrete(support: Vec<Vec<T>>, log_weights: Vec<T>) -> Result<Self> {
        Self::discrete_staged(support, vec![log_weights])
    }

    pub fn discrete_staged(support: Vec<Vec<T>>, log_weights: Vec<Vec<T>>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("noise support must be nonempty"));
        }
        let dim = support[0].len();
        if let Some(bad) = support.iter().find(|w| w.len() != dim) {
            return Err(Error::Dimension { what: "noise support point", expected: dim, found: bad.len() });
        }
        if log_weights.is_empty() {
            return Err(Error::invalid("at least one noise stage required"));
        }
        let stages = log_weights
            .into_iter()
            .map(|lw| {
                if lw.len() != support.len() {
                    return Err(Error::Dimension {
                        what: "noise log-weights",
                        expected: support.len(),
                        found: lw.len(),
                    });
                }
                if lw.iter().any(|v| v.partial_cmp(v).is_none() || *v == crate::scalar::infinity::<T>()) {
                    return Err(Error::invalid("noise log-weights must be < +inf"));
                }
                let norm = crate::scalar::log_sum_exp(&lw);
                if !norm.is_finite() {
                    return Err(Error::invalid("noise weights sum to zero"));
                }
                let log_probs: Vec<T> = lw.iter().map(|&v| v - norm).collect();
                let cdf = compensated_cumsum(log_probs.iter().map(|&v| crate::scalar::to_f64(v).exp()));
                Ok(DiscreteStage { log_probs, cdf })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Discrete { support, stages })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { stages } => stages[0].covariance.nrows(),
            Self::Discrete { support, .. } => support[0].len(),
        }
    }

    fn stage_index(len: usize, k: usize) -> usize {
        if len == 1 {
            0
        } else {
            assert!(k < len, "noise stage {k} out of range ({len} stages)");
            k
        }
    }

    pub fn gaussian_stage(&self, k: usize) -> Option<&GaussianStage<T>> {
        match self {
            Self::Gaussian { stages } => Some(&stages[Self::stage_index(stages.len(), k)]),
            Self::Discrete { .. } => None,
        }
    }

    pub fn discrete_stage(&self, k: usize) -> Option<&DiscreteStage<T>> {
        match self {
            Self::Discrete { stages, .. } => Some(&stages[Self::stage_index(stages.len(), k)]),
            Self::Gaussian { .. } => None,
        }
    }

    pub fn support(&self) -> Option<&[Vec<T>]> {
        match self {
            Self::Discrete { support, .. } => Some(support),
            Self::Gaussian { .. } => None,
        }
    }

    /// Draws `w_k` into `out`. Gaussian draws consume `m` normals; discrete
    /// draws consume one uniform.
    #[inline]
    pub fn sample_into(&self, k: usize, rng: &mut StreamRng, out: &mut [T]) {
        match self {
            Self::Gaussian { stages } => stages[Self::stage_index(stages.len(), k)].sample_into(rng, out),
            Self::Discrete { support, stages } => {
                let idx = stages[Self::stage_index(stages.len(), k)].sample_index(rng);
                out.copy_from_slice(&support[idx]);
            }
        }
    }

    /// Log density (continuous) or log pmf (discrete; `-inf` off support).
    pub fn log_density(&self, k: usize, w: &[T]) -> T {
        match self {
            Self::Gaussian { stages } => stages[Self::stage_index(stages.len(), k)].log_density(w),
            Self::Discrete { support, stages } => {
                let stage = &stages[Self::stage_index(stages.len(), k)];
                support
                    .iter()
                    .position(|s| s.as_slice() == w)
                    .map(|i| stage.log_probs[i])
                    .unwrap_or_else(neg_infinity)
            }
        }
    }
}

/// States `x_{k0}..x_N` and the inputs that produced them. For
/// noise-driven rollouts the inputs are the drawn noises.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub start_stage: usize,
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn final_stage(&self) -> usize {
        self.start_stage + self.states.len() - 1
    }
}

fn check_start<T: Scalar, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    x0: &[T],
    k0: usize,
    horizon: Horizon,
) -> Result<()> {
    if k0 > horizon.stages() {
        return Err(Error::invalid(format!("start stage {k0} beyond horizon {}", horizon.stages())));
    }
    if x0.len() != dynamics.state_dim() {
        return Err(Error::Dimension { what: "initial state", expected: dynamics.state_dim(), found: x0.len() });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }
    Ok(())
}

/// Simulates `x̄_{k+1} = f(x̄_k, w_k)` from `x̄_{k0} = x0` to stage `N`,
/// drawing every `w_k` sequentially from `stream`.
pub fn rollout_noise_driven<T: Scalar, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    x0: &DVector<T>,
    k0: usize,
    horizon: Horizon,
    stream: RngStream,
) -> Result<Trajectory<T>> {
    check_start(dynamics, x0.as_slice(), k0, horizon)?;
    if noise.dim() != dynamics.input_dim() {
        return Err(Error::Dimension { what: "noise", expected: dynamics.input_dim(), found: noise.dim() });
    }
    let mut rng = stream.rng();
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(horizon.stages() - k0);
    for k in k0..horizon.stages() {
        let mut w = DVector::zeros(dynamics.input_dim());
        noise.sample_into(k, &mut rng, w.as_mut_slice());
        let next = dynamics.step_vec(states.last().unwrap(), &w);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { stage: k + 1 });
        }
        states.push(next);
        inputs.push(w);
    }
    Ok(Trajectory { start_stage: k0, states, inputs })
}

/// `Σ_{s=k0}^{N} ℓ_s(x̄_s)` along a trajectory that ends at stage `N`.
pub fn path_cost<T: Scalar, C: CostSchedule<T> + ?Sized>(
    costs: &C,
    traj: &Trajectory<T>,
    k0: usize,
) -> Result<T> {
    let last = traj.final_stage();
    if k0 < traj.start_stage || k0 > last {
        return Err(Error::invalid(format!(
            "trajectory spans stages {}..={last}, cost requested from {k0}",
            traj.start_stage
        )));
    }
    let horizon = Horizon::new(last.max(1))?;
    let mut total = T::zero();
    for (s, x) in traj.states.iter().enumerate().skip(k0 - traj.start_stage) {
        let stage = traj.start_stage + s;
        let c = if stage == last { costs.terminal(x.as_slice()) } else { costs.stage_cost(stage, horizon, x.as_slice()) };
        if !c.is_finite() {
            return Err(Error::NonFiniteCost { stage });
        }
        total += c;
    }
    Ok(total)
}

/// Reusable buffers for allocation-free path-cost sampling.
pub(crate) struct RolloutScratch<T> {
    x: Vec<T>,
    next: Vec<T>,
    w: Vec<T>,
}

impl<T: Scalar> RolloutScratch<T> {
    pub(crate) fn new(n: usize, m: usize) -> Self {
        Self { x: vec![T::zero(); n], next: vec![T::zero(); n], w: vec![T::zero(); m] }
    }
}

/// Path cost `Σ_{s=k0}^{N} ℓ_s(x̄_s)` of one noise-driven sample path drawn
/// from `stream`, without storing the states.
#[inline]
pub(crate) fn sample_path_cost<T: Scalar, D, C>(
    dynamics: &D,
    noise: &NoiseModel<T>,
    costs: &C,
    x0: &[T],
    k0: usize,
    horizon: Horizon,
    stream: RngStream,
    scratch: &mut RolloutScratch<T>,
) -> Result<T>
where
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    let n_stages = horizon.stages();
    scratch.x.copy_from_slice(x0);
    let mut total = costs.stage_cost(k0, horizon, &scratch.x);
    if !total.is_finite() {
        return Err(Error::NonFiniteCost { stage: k0 });
    }
    if k0 == n_stages {
        return Ok(total);
    }
    let mut rng = stream.rng();
    for k in k0..n_stages {
        noise.sample_into(k, &mut rng, &mut scratch.w);
        dynamics.step(&scratch.x, &scratch.w, &mut scratch.next);
        std::mem::swap(&mut scratch.x, &mut scratch.next);
        if !scratch.x.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { stage: k + 1 });
        }
        let c = costs.stage_cost(k + 1, horizon, &scratch.x);
        if !c.is_finite() {
            return Err(Error::NonFiniteCost { stage: k + 1 });
        }
        total += c;
    }
    Ok(total)
}

/// Fills `out` with the noises `w_{k0}..w_{N-1}` that [`sample_path_cost`]
/// would draw from `stream`, `m` values per stage.
pub(crate) fn draw_noise_path<T: Scalar>(noise: &NoiseModel<T>, k0: usize, horizon: Horizon, stream: RngStream, out: &mut [T]) {
    let m = noise.dim();
    let mut rng = stream.rng();
    for (k, w) in (k0..horizon.stages()).zip(out.chunks_exact_mut(m)) {
        noise.sample_into(k, &mut rng, w);
    }
}

/// [`sample_path_cost`] driven by pre-drawn noises; bit-identical to it
/// when `noises` comes from [`draw_noise_path`] with the same stream.
#[inline]
pub(crate) fn replay_path_cost<T: Scalar, D, C>(
    dynamics: &D,
    costs: &C,
    x0: &[T],
    k0: usize,
    horizon: Horizon,
    noises: &[T],
    scratch: &mut RolloutScratch<T>,
) -> Result<T>
where
    D: Dynamics<T> + ?Sized,
    C: CostSchedule<T> + ?Sized,
{
    let m = dynamics.input_dim();
    scratch.x.copy_from_slice(x0);
    let mut total = costs.stage_cost(k0, horizon, &scratch.x);
    if !total.is_finite() {
        return Err(Error::NonFiniteCost { stage: k0 });
    }
    for (k, w) in (k0..horizon.stages()).zip(noises.chunks_exact(m)) {
        dynamics.step(&scratch.x, w, &mut scratch.next);
        std::mem::swap(&mut scratch.x, &mut scratch.next);
        if !scratch.x.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { stage: k + 1 });
        }
        let c = costs.stage_cost(k + 1, horizon, &scratch.x);
        if !c.is_finite() {
            return Err(Error::NonFiniteCost { stage: k + 1 });
        }
        total += c;
    }
    Ok(total)
}

/// `KL(N(μ1, Σ1) || N(μ0, Σ0))` in closed form.
pub fn kl_gaussians<T: Scalar>(
    mean1: &DVector<T>,
    cov1: &DMatrix<T>,
    mean0: &DVector<T>,
    cov0: &DMatrix<T>,
) -> Result<T> {
    let m = mean1.len();
    if mean0.len() != m {
        return Err(Error::Dimension { what: "mean", expected: m, found: mean0.len() });
    }
    linalg::check_square(cov1, m, "covariance")?;
    linalg::check_square(cov0, m, "covariance")?;
    let c1 = linalg::check_spd(cov1, "covariance", None)?;
    let c0 = linalg::check_spd(cov0, "covariance", None)?;
    let trace = c0.solve(cov1).trace();
    let diff = mean1 - mean0;
    let maha = diff.dot(&c0.solve(&diff));
    let kl = lit::<T>(0.5) * (trace + maha - lit::<T>(m as f64) + linalg::log_det(&c0) - linalg::log_det(&c1));
    Ok(kl.max(T::zero()))
}
