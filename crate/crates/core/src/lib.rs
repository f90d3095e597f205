//! KL-regularized optimal control for discrete-time systems.
//!
//! The control cost is the KL divergence between the controlled transition
//! law and the noise-driven reference `x̄_{k+1} = f(x̄_k, w_k)`. Under that
//! choice the exponentiated value function `Z = exp(-V)` (the desirability)
//! obeys a linear backward recursion and a path-integral representation,
//! which this crate evaluates:
//!
//! - [`path_integral`]: Monte-Carlo estimates of `log Z` and sampling of the
//!   optimal continuous-input policy.
//! - [`lqg`]: the closed-form linear-Gaussian solution (Riccati recursion,
//!   backward and forward desirability, LQR duality).
//! - [`discrete_input`]: finite input sets with tabulated noise, including the
//!   receding closed loop.
//! - [`finite_mdp`]: conventional KL control on finite state spaces.
//! - [`cart_pole`]: the Euler-discretized cart-pole benchmark.
//!
//! Numerics are generic over [`Scalar`] (`f32`/`f64`); the `*64` aliases below
//! fix the common double-precision case.

// Solver entry points take the whole problem description positionally, and
// `!(a >= b)` is the NaN-rejecting comparison throughout. Small dense
// kernels index matrices and slices together by position.
#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cart_pole;
pub mod discrete_input;
pub mod error;
pub mod finite_mdp;
mod linalg;
pub mod lqg;
pub mod path_integral;
pub mod problem;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use problem::{
    kl_gaussians, path_cost, rollout_noise_driven, CostSchedule, Dynamics, FnCost, FnDynamics,
    Horizon, LinearDynamics, NoiseModel, QuadraticCost, Trajectory, ZeroCost,
};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type NoiseModel64 = problem::NoiseModel<f64>;
pub type Trajectory64 = problem::Trajectory<f64>;
pub type LinearDynamics64 = problem::LinearDynamics<f64>;
pub type QuadraticCost64 = problem::QuadraticCost<f64>;
pub type DesirabilityEstimate64 = path_integral::DesirabilityEstimate<f64>;
pub type PolicySample64 = path_integral::PolicySample<f64>;
pub type LqgProblem64 = lqg::LqgProblem<f64>;
pub type RiccatiSolution64 = lqg::RiccatiSolution<f64>;
pub type GaussianPolicyStage64 = lqg::GaussianPolicyStage<f64>;
pub type DiscreteInputSet64 = discrete_input::DiscreteInputSet<f64>;
pub type DiscreteActionPolicy64 = discrete_input::DiscreteActionPolicy<f64>;
pub type FiniteMdp64 = finite_mdp::FiniteMdp<f64>;
pub type DesirabilityTable64 = finite_mdp::DesirabilityTable<f64>;
pub type CartPole64 = cart_pole::CartPole<f64>;
pub type CartPoleParams64 = cart_pole::CartPoleParams<f64>;
pub type CartPoleState64 = cart_pole::CartPoleState<f64>;
