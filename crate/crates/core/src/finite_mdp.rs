//! Conventional KL control on a finite state space, where any transition
//! row can be realized by some policy.
//!
//! `z(N, x) = exp(-ℓ_N(x))`, `z(k, x) = exp(-ℓ_k(x)) Σ_{x'} p⁰_{k+1}(x'|x) z(k+1, x')`,
//! and the optimal transition law reweights `p⁰` by `z(k+1, ·)`. Everything
//! is stored as `log z`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, log_sum_exp, neg_infinity, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp<T: Scalar> {
    transitions: Vec<DMatrix<T>>,
    costs: Vec<DVector<T>>,
}

impl<T: Scalar> FiniteMdp<T> {
    /// `transitions[k]` is the row-stochastic `p⁰_{k+1}(x'|x)` (row `x`)
    /// for `k = 0..N-1`, or a single matrix used at every stage.
    /// `costs` holds `ℓ_0..ℓ_N`; `+inf` entries mark forbidden states.
    pub fn new(transitions: Vec<DMatrix<T>>, costs: Vec<DVector<T>>) -> Result<Self> {
        if costs.len() < 2 {
            return Err(Error::invalid("need stage costs ℓ_0..ℓ_N with N ≥ 1"));
        }
        let n_stages = costs.len() - 1;
        let states = costs[0].len();
        if states == 0 {
            return Err(Error::invalid("state space must be nonempty"));
        }
        if transitions.len() != n_stages && transitions.len() != 1 {
            return Err(Error::Dimension { what: "transition matrices", expected: n_stages, found: transitions.len() });
        }
        let tol = lit::<T>(1e-12);
        for (k, p) in transitions.iter().enumerate() {
            if p.nrows() != states || p.ncols() != states {
                return Err(Error::Dimension { what: "transition matrix", expected: states, found: p.nrows().max(p.ncols()) });
            }
            for (x, row) in p.row_iter().enumerate() {
                if row.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                    return Err(Error::invalid(format!("negative or non-finite transition entry (stage {k}, state {x})")));
                }
                if (row.sum() - T::one()).abs() > tol {
                    return Err(Error::invalid(format!("transition row (stage {k}, state {x}) does not sum to 1")));
                }
            }
        }
        for c in &costs {
            if c.len() != states {
                return Err(Error::Dimension { what: "cost vector", expected: states, found: c.len() });
            }
            if c.iter().any(|v| v.partial_cmp(v).is_none() || *v == neg_infinity::<T>()) {
                return Err(Error::invalid("costs must be > -inf and not NaN"));
            }
        }
        let transitions = if transitions.len() == 1 { vec![transitions[0].clone(); n_stages] } else { transitions };
        Ok(Self { transitions, costs })
    }

    pub fn states(&self) -> usize {
        self.costs[0].len()
    }

    pub fn stages(&self) -> usize {
        self.costs.len() - 1
    }

    /// `p⁰_{k+1}(·|·)`.
    pub fn transition(&self, k: usize) -> &DMatrix<T> {
        &self.transitions[k]
    }

    pub fn cost(&self, k: usize) -> &DVector<T> {
        &self.costs[k]
    }
}

/// `log z(k, x)` for `k = 0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesirabilityTable<T: Scalar> {
    pub log_z: Vec<DVector<T>>,
}

impl<T: Scalar> DesirabilityTable<T> {
    pub fn log_z(&self, k: usize, x: usize) -> T {
        self.log_z[k][x]
    }
}

fn log_expectation<T: Scalar>(p: &DMatrix<T>, x: usize, log_next: &DVector<T>, buf: &mut Vec<T>) -> T {
    buf.clear();
    for (j, &prob) in p.row(x).iter().enumerate() {
        if prob > T::zero() {
            buf.push(prob.ln() + log_next[j]);
        }
    }
    log_sum_exp(buf)
}

/// Backward recursion from an arbitrary terminal `log z(N, ·)`. The map is
/// linear in `z(N, ·)`.
pub fn propagate_log_desirability<T: Scalar>(mdp: &FiniteMdp<T>, terminal_log_z: DVector<T>) -> Result<DesirabilityTable<T>> {
    let n_stages = mdp.stages();
    if terminal_log_z.len() != mdp.states() {
        return Err(Error::Dimension { what: "terminal desirability", expected: mdp.states(), found: terminal_log_z.len() });
    }
    let mut log_z = vec![DVector::zeros(0); n_stages + 1];
    log_z[n_stages] = terminal_log_z;
    let mut buf = Vec::with_capacity(mdp.states());
    for k in (0..n_stages).rev() {
        let mut current = DVector::zeros(mdp.states());
        for x in 0..mdp.states() {
            let cont = log_expectation(&mdp.transitions[k], x, &log_z[k + 1], &mut buf);
            let v = cont - mdp.costs[k][x];
            if !v.is_finite() {
                return Err(Error::DegenerateState { stage: k, state: x });
            }
            current[x] = v;
        }
        log_z[k] = current;
    }
    Ok(DesirabilityTable { log_z })
}

/// Desirability table with `z(N, x) = exp(-ℓ_N(x))`.
pub fn solve_desirability<T: Scalar>(mdp: &FiniteMdp<T>) -> Result<DesirabilityTable<T>> {
    let terminal = -mdp.costs[mdp.stages()].clone();
    if let Some(x) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::DegenerateState { stage: mdp.stages(), state: x });
    }
    propagate_log_desirability(mdp, terminal)
}

/// `log 𝔸_{p⁰}[z](k, x) = log Σ_{x'} p⁰_{k+1}(x'|x) z(k+1, x')`.
pub fn log_expected_desirability<T: Scalar>(mdp: &FiniteMdp<T>, table: &DesirabilityTable<T>, k: usize, x: usize) -> T {
    log_expectation(&mdp.transitions[k], x, &table.log_z[k + 1], &mut Vec::new())
}

/// Optimal row `p*_{k+1}(·|x) ∝ p⁰_{k+1}(·|x) z(k+1, ·)` for `k < N`.
pub fn optimal_transition<T: Scalar>(
    mdp: &FiniteMdp<T>,
    table: &DesirabilityTable<T>,
    k: usize,
    x: usize,
) -> Result<DVector<T>> {
    if k >= mdp.stages() || x >= mdp.states() {
        return Err(Error::invalid(format!("stage {k} / state {x} out of range")));
    }
    let norm = log_expected_desirability(mdp, table, k, x);
    if !norm.is_finite() {
        return Err(Error::DegenerateState { stage: k, state: x });
    }
    let p = &mdp.transitions[k];
    Ok(DVector::from_iterator(
        mdp.states(),
        (0..mdp.states()).map(|j| {
            let prob = p[(x, j)];
            if prob > T::zero() {
                (prob.ln() + table.log_z[k + 1][j] - norm).exp()
            } else {
                T::zero()
            }
        }),
    ))
}

/// Optimal cost-to-go `v(k, x) = -log z(k, x)`.
pub fn exact_value<T: Scalar>(table: &DesirabilityTable<T>, k: usize, x: usize) -> T {
    -table.log_z[k][x]
}
