//! Closed-form KL control for `x_{k+1} = A x_k + B u_k` with quadratic state
//! cost `ℓ_k(x) = ½ xᵀ Q_k x` and Gaussian reference noise `w_k ~ N(0, Σ_k)`.
//!
//! The optimal policy is `π_k*(u|x) = N(u | -K_k x, C_k)` with
//! `C_k = (Σ_k⁻¹ + Bᵀ P_{k+1} B)⁻¹`, `K_k = C_k Bᵀ P_{k+1} A`, and
//! the desirability is `Z(k, x) = c_k exp(-½ xᵀ P_k x)` where `P_k` solves
//!
//! ```text
//! P_k = Q_k + Aᵀ P_{k+1} A − Aᵀ P_{k+1} B (Σ_k⁻¹ + Bᵀ P_{k+1} B)⁻¹ Bᵀ P_{k+1} A,   P_N = Q_N
//! log c_k = −½ Σ_{s=k+1}^{N} log det(I + P_s B Σ_{s−1} Bᵀ)
//! ```
//!
//! `Σ_k⁻¹` is never formed. With `Σ_k = S Sᵀ`,
//! `C_k = S (I + Sᵀ Bᵀ P_{k+1} B S)⁻¹ Sᵀ`, and by Sylvester's identity the
//! same SPD matrix `H = I + Sᵀ Bᵀ P_{k+1} B S` carries the log-determinant.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, log_det, symmetrize};
use crate::problem::{GaussianStage, Horizon, LinearDynamics, NoiseModel, QuadraticCost};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone)]
pub struct LqgProblem<T: Scalar> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    q: Vec<DMatrix<T>>,
    sigma: Vec<GaussianStage<T>>,
}

impl<T: Scalar> LqgProblem<T> {
    /// `q` holds `Q_0..Q_N` and `sigma` holds `Σ_0..Σ_{N-1}`.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, q: Vec<DMatrix<T>>, sigma: Vec<DMatrix<T>>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        linalg::check_square(&a, n, "A")?;
        linalg::check_square(&b, n, "B")?;
        if sigma.is_empty() {
            return Err(Error::invalid("horizon must have at least one stage"));
        }
        if q.len() != sigma.len() + 1 {
            return Err(Error::Dimension { what: "state weights Q_0..Q_N", expected: sigma.len() + 1, found: q.len() });
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("A and B must be finite"));
        }
        let det_b = b.clone().lu().determinant();
        if !det_b.is_finite() || det_b == T::zero() {
            return Err(Error::invalid("B must be invertible"));
        }
        for (k, qk) in q.iter().enumerate() {
            linalg::check_square(qk, n, "Q")?;
            linalg::check_spd(qk, "Q", Some(k))?;
        }
        let sigma = sigma
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                linalg::check_square(&s, n, "noise covariance")?;
                GaussianStage::new(s, Some(k))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { a, b, q, sigma })
    }

    /// Time-invariant weights over `stages` stages.
    pub fn stationary(a: DMatrix<T>, b: DMatrix<T>, q: DMatrix<T>, sigma: DMatrix<T>, stages: usize) -> Result<Self> {
        Self::new(a, b, vec![q; stages + 1], vec![sigma; stages])
    }

    /// One-dimensional problem with constant weights.
    pub fn scalar(a: T, b: T, q: T, sigma: T, stages: usize) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::stationary(m(a), m(b), m(q), m(sigma), stages)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn horizon(&self) -> Horizon {
        Horizon::new(self.sigma.len()).expect("validated on construction")
    }

    pub fn stages(&self) -> usize {
        self.sigma.len()
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn q(&self, k: usize) -> &DMatrix<T> {
        &self.q[k]
    }

    pub fn sigma(&self, k: usize) -> &DMatrix<T> {
        self.sigma[k].covariance()
    }

    pub fn dynamics(&self) -> LinearDynamics<T> {
        LinearDynamics { a: self.a.clone(), b: self.b.clone() }
    }

    pub fn noise(&self) -> NoiseModel<T> {
        NoiseModel::Gaussian { stages: self.sigma.clone() }
    }

    pub fn costs(&self) -> QuadraticCost<T> {
        QuadraticCost::new(self.q.clone())
    }

    fn check_state(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { what: "state", expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    fn check_stage(&self, k: usize, allow_terminal: bool) -> Result<()> {
        let last = if allow_terminal { self.stages() } else { self.stages() - 1 };
        if k > last {
            return Err(Error::invalid(format!("stage {k} out of range 0..={last}")));
        }
        Ok(())
    }
}

/// `P_0..P_N` and the log-determinant prefactors `log c_0..log c_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution<T: Scalar> {
    pub p: Vec<DMatrix<T>>,
    pub log_prefactor: Vec<T>,
}

impl<T: Scalar> RiccatiSolution<T> {
    pub fn p(&self, k: usize) -> &DMatrix<T> {
        &self.p[k]
    }
}

/// `N(-K_k x, C_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyStage<T: Scalar> {
    pub gain: DMatrix<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Scalar> GaussianPolicyStage<T> {
    pub fn mean(&self, x: &DVector<T>) -> DVector<T> {
        -(&self.gain * x)
    }
}

/// `H = I + Sᵀ Bᵀ P B S` factored, plus `S` itself.
fn stage_system<'a, T: Scalar>(
    prob: &'a LqgProblem<T>,
    p_next: &DMatrix<T>,
    k: usize,
) -> Result<(Cholesky<T, Dyn>, &'a DMatrix<T>)> {
    let s = prob.sigma[k].sqrt();
    let bs = &prob.b * s;
    let mut h = bs.transpose() * p_next * &bs;
    for i in 0..h.nrows() {
        h[(i, i)] += T::one();
    }
    symmetrize(&mut h);
    Ok((cholesky(&h, "I + SᵀBᵀPBS", Some(k))?, s))
}

/// `C_k = S H⁻¹ Sᵀ`, symmetrized.
fn policy_covariance<T: Scalar>(h: &Cholesky<T, Dyn>, s: &DMatrix<T>) -> DMatrix<T> {
    let mut c = s * h.solve(&s.transpose());
    symmetrize(&mut c);
    c
}

/// Backward Riccati recursion. Each `P_k` is symmetrized and must admit a
/// Cholesky factorization.
pub fn solve_riccati<T: Scalar>(prob: &LqgProblem<T>) -> Result<RiccatiSolution<T>> {
    let n_stages = prob.stages();
    let mut p = vec![DMatrix::zeros(0, 0); n_stages + 1];
    let mut log_prefactor = vec![T::zero(); n_stages + 1];
    p[n_stages] = prob.q[n_stages].clone();
    let half = lit::<T>(0.5);
    let at = prob.a.transpose();
    for k in (0..n_stages).rev() {
        let p_next = &p[k + 1];
        let (h, s) = stage_system(prob, p_next, k)?;
        let c = policy_covariance(&h, s);
        let pb = p_next * &prob.b;
        let gain = &c * pb.transpose() * &prob.a;
        let mut pk = &prob.q[k] + &at * p_next * &prob.a - &at * &pb * gain;
        symmetrize(&mut pk);
        cholesky(&pk, "Riccati P", Some(k))?;
        log_prefactor[k] = log_prefactor[k + 1] - half * log_det(&h);
        p[k] = pk;
    }
    Ok(RiccatiSolution { p, log_prefactor })
}

/// Optimal Gaussian policy parameters at stage `k < N`.
pub fn policy_stage<T: Scalar>(prob: &LqgProblem<T>, sol: &RiccatiSolution<T>, k: usize) -> Result<GaussianPolicyStage<T>> {
    prob.check_stage(k, false)?;
    let p_next = &sol.p[k + 1];
    let (h, s) = stage_system(prob, p_next, k)?;
    let covariance = policy_covariance(&h, s);
    let gain = &covariance * prob.b.transpose() * p_next * &prob.a;
    Ok(GaussianPolicyStage { gain, covariance })
}

/// `log Z(k, x) = log c_k − ½ xᵀ P_k x`.
pub fn log_desirability_backward<T: Scalar>(
    prob: &LqgProblem<T>,
    sol: &RiccatiSolution<T>,
    k: usize,
    x: &DVector<T>,
) -> Result<T> {
    prob.check_stage(k, true)?;
    prob.check_state(x)?;
    Ok(sol.log_prefactor[k] - lit::<T>(0.5) * x.dot(&(&sol.p[k] * x)))
}

/// Stacked quantities of the forward (batch) representation over stages
/// `k+1..N`: `G = I + Rᵀ L Σ Lᵀ R` factored and `Y = Rᵀ Ā`, where
/// `R Rᵀ = blkdiag(Q_{k+1}, .., Q_N)`, `Ā = [A; A²; ..; A^{N−k}]` and `L` is
/// block lower-triangular with `L_{ij} = A^{i−j} B`.
///
/// Then `det(I + Q L Σ Lᵀ) = det G` and
/// `Āᵀ (Q⁻¹ + L Σ Lᵀ)⁻¹ Ā = Yᵀ G⁻¹ Y`.
/// Dense assembly is `O(n³ (N−k)³)`.
struct ForwardBlocks<T: Scalar> {
    g: Cholesky<T, Dyn>,
    y: DMatrix<T>,
}

fn forward_blocks<T: Scalar>(prob: &LqgProblem<T>, k: usize) -> Result<ForwardBlocks<T>> {
    let n = prob.dim();
    let r = prob.stages() - k;
    let dim = n * r;
    let mut powers = Vec::with_capacity(r + 1);
    powers.push(DMatrix::<T>::identity(n, n));
    for i in 1..=r {
        powers.push(&prob.a * &powers[i - 1]);
    }
    let mut a_bar = DMatrix::zeros(dim, n);
    for i in 0..r {
        a_bar.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
    }
    // L · blkdiag(S_k..S_{N-1}): block (i, j) = A^{i-j} B S_{k+j}.
    let mut ls = DMatrix::zeros(dim, dim);
    for j in 0..r {
        let bs = &prob.b * prob.sigma[k + j].sqrt();
        for i in j..r {
            ls.view_mut((i * n, j * n), (n, n)).copy_from(&(&powers[i - j] * &bs));
        }
    }
    let q_factors: Vec<DMatrix<T>> = (0..r)
        .map(|i| cholesky(&prob.q[k + 1 + i], "Q", Some(k + 1 + i)).map(|c| c.l()))
        .collect::<Result<_>>()?;
    let refs: Vec<&DMatrix<T>> = q_factors.iter().collect();
    let rt = linalg::block_diag(&refs).transpose();
    let rls = &rt * ls;
    let mut g = &rls * rls.transpose();
    for i in 0..dim {
        g[(i, i)] += T::one();
    }
    symmetrize(&mut g);
    let g = cholesky(&g, "forward system I + RᵀLΣLᵀR", Some(k))?;
    Ok(ForwardBlocks { g, y: rt * a_bar })
}

/// `log Z(k, x)` from the Gaussian law of the stacked noise-driven path
/// `x̄_{k+1:N} ~ N(Ā x, L Σ Lᵀ)`, independent of the Riccati recursion.
pub fn log_desirability_forward<T: Scalar>(prob: &LqgProblem<T>, k: usize, x: &DVector<T>) -> Result<T> {
    prob.check_stage(k, true)?;
    prob.check_state(x)?;
    let half = lit::<T>(0.5);
    let own = half * x.dot(&(&prob.q[k] * x));
    if k == prob.stages() {
        return Ok(-own);
    }
    let blocks = forward_blocks(prob, k)?;
    let yx = &blocks.y * x;
    let quad = yx.dot(&blocks.g.solve(&yx));
    Ok(-half * log_det(&blocks.g) - own - half * quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqrValueMode {
    /// `½ xᵀ P_k x`.
    Riccati,
    /// `½ xᵀ (Q_k + Āᵀ (Q⁻¹ + L Σ Lᵀ)⁻¹ Ā) x`.
    Batch,
}

/// Value of the deterministic LQR problem with input weight `Σ_s⁻¹`.
pub fn lqr_value<T: Scalar>(
    prob: &LqgProblem<T>,
    sol: &RiccatiSolution<T>,
    k: usize,
    x: &DVector<T>,
    mode: LqrValueMode,
) -> Result<T> {
    prob.check_stage(k, true)?;
    prob.check_state(x)?;
    let half = lit::<T>(0.5);
    match mode {
        LqrValueMode::Riccati => Ok(half * x.dot(&(&sol.p[k] * x))),
        LqrValueMode::Batch => {
            let own = x.dot(&(&prob.q[k] * x));
            if k == prob.stages() {
                return Ok(half * own);
            }
            let blocks = forward_blocks(prob, k)?;
            let yx = &blocks.y * x;
            Ok(half * (own + yx.dot(&blocks.g.solve(&yx))))
        }
    }
}

/// Optimal policy when the controller also observes the current noise `w`
/// (applied input `u + w`). With additive noise the uncontrolled and
/// noise-driven references coincide, so `z = Z` and the policy is
/// `N(u | -C_k (Σ_k⁻¹ w + Bᵀ P_{k+1} A x), C_k)`.
pub fn noncausal_policy_stage<T: Scalar>(
    prob: &LqgProblem<T>,
    sol: &RiccatiSolution<T>,
    k: usize,
    x: &DVector<T>,
    w: &DVector<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    prob.check_stage(k, false)?;
    prob.check_state(x)?;
    prob.check_state(w)?;
    let p_next = &sol.p[k + 1];
    let (h, s) = stage_system(prob, p_next, k)?;
    let c = policy_covariance(&h, s);
    let rhs = prob.sigma[k].cholesky().solve(w) + prob.b.transpose() * p_next * &prob.a * x;
    Ok((-(&c * rhs), c))
}
