//! Frictionless cart-pole with a point mass on a massless rod, integrated
//! with a forward Euler step. `θ = 0` is upright and is never wrapped.

use crate::error::{Error, Result};
use crate::problem::{CostSchedule, Dynamics};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams<T> {
    /// Cart mass `M` (kg).
    pub cart_mass: T,
    /// Point mass `m` (kg).
    pub pole_mass: T,
    /// Rod length `L` (m).
    pub length: T,
    /// Gravitational acceleration (m/s²).
    pub gravity: T,
    /// Euler step `τ` (s).
    pub dt: T,
}

impl<T: Scalar> Default for CartPoleParams<T> {
    fn default() -> Self {
        Self {
            cart_mass: lit(1.0),
            pole_mass: lit(0.1),
            length: lit(1.0),
            gravity: lit(9.8),
            dt: lit(0.05),
        }
    }
}

impl<T: Scalar> CartPoleParams<T> {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cart mass", self.cart_mass),
            ("pole mass", self.pole_mass),
            ("rod length", self.length),
            ("gravity", self.gravity),
            ("time step", self.dt),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::invalid(format!("cart-pole {name} must be positive and finite")));
            }
        }
        Ok(())
    }
}

/// `[x̄, x̄̇, θ, θ̇]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState<T> {
    pub position: T,
    pub velocity: T,
    pub angle: T,
    pub angular_velocity: T,
}

impl<T: Scalar> CartPoleState<T> {
    pub fn new(position: T, velocity: T, angle: T, angular_velocity: T) -> Self {
        Self { position, velocity, angle, angular_velocity }
    }

    pub fn from_slice(x: &[T]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.position, self.velocity, self.angle, self.angular_velocity]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Cart and pole accelerations `(h₁, h₂)` for force `u`.
#[inline]
pub fn accelerations<T: Scalar>(p: &CartPoleParams<T>, angle: T, angular_velocity: T, force: T) -> (T, T) {
    let (sin, cos) = angle.sin_cos();
    let m_sin = p.pole_mass * sin;
    // -mLθ̇² sinθ + mg sinθ cosθ + u over M + m sin²θ
    let h1 = (m_sin * (p.gravity * cos - p.length * angular_velocity * angular_velocity) + force)
        / (p.cart_mass + m_sin * sin);
    let h2 = (h1 * cos + p.gravity * sin) / p.length;
    (h1, h2)
}

/// One Euler step. Fails on a non-finite result.
pub fn euler_step<T: Scalar>(p: &CartPoleParams<T>, s: &CartPoleState<T>, force: T) -> Result<CartPoleState<T>> {
    let next = step_unchecked(p, s, force);
    if !next.is_finite() {
        return Err(Error::RolloutDiverged { stage: 1 });
    }
    Ok(next)
}

#[inline]
fn step_unchecked<T: Scalar>(p: &CartPoleParams<T>, s: &CartPoleState<T>, force: T) -> CartPoleState<T> {
    let (h1, h2) = accelerations(p, s.angle, s.angular_velocity, force);
    CartPoleState {
        position: s.position + p.dt * s.velocity,
        velocity: s.velocity + p.dt * h1,
        angle: s.angle + p.dt * s.angular_velocity,
        angular_velocity: s.angular_velocity + p.dt * h2,
    }
}

/// `q₁|x̄| + q₂|x̄̇| + q₃|θ| + q₄|θ̇|`.
#[inline]
pub fn stage_cost<T: Scalar>(weights: &[T; 4], x: &[T]) -> T {
    weights[0] * x[0].abs() + weights[1] * x[1].abs() + weights[2] * x[2].abs() + weights[3] * x[3].abs()
}

/// Cart-pole as a [`Dynamics`] with `n = 4`, `m = 1` (horizontal force).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPole<T> {
    pub params: CartPoleParams<T>,
}

impl<T: Scalar> CartPole<T> {
    pub fn new(params: CartPoleParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl<T: Scalar> Dynamics<T> for CartPole<T> {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    #[inline]
    fn step(&self, x: &[T], u: &[T], next: &mut [T]) {
        let s = step_unchecked(&self.params, &CartPoleState::from_slice(x), u[0]);
        next.copy_from_slice(&s.to_array());
    }
}

/// The weighted absolute-value cost, identical at every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleCost<T> {
    pub weights: [T; 4],
}

impl<T: Scalar> CartPoleCost<T> {
    /// `q = (7.0, 2.5, 7.0, 2.5)`.
    pub fn standard() -> Self {
        Self { weights: [lit(7.0), lit(2.5), lit(7.0), lit(2.5)] }
    }
}

impl<T: Scalar> CostSchedule<T> for CartPoleCost<T> {
    #[inline]
    fn running(&self, _stage: usize, x: &[T]) -> T {
        stage_cost(&self.weights, x)
    }
    #[inline]
    fn terminal(&self, x: &[T]) -> T {
        stage_cost(&self.weights, x)
    }
}
