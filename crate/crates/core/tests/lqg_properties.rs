use kl_control::lqg::*;
use kl_control::{kl_gaussians, LqgProblem64, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

fn random_problem(rng: &mut impl Rng) -> LqgProblem64 {
    let n = rng.random_range(1..=3);
    let stages = rng.random_range(1..=20);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
    let b = loop {
        let b: DMatrix<f64> = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        if b.determinant().abs() > 0.1 {
            break b;
        }
    };
    let q = (0..=stages).map(|_| spd(rng, n)).collect();
    let sigma = (0..stages).map(|_| spd(rng, n)).collect();
    LqgProblem::new(a, b, q, sigma).unwrap()
}

fn random_state(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn forward_and_backward_desirability_agree() {
    let mut rng = RngStream::new(101).rng();
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let prob = random_problem(&mut rng);
        let sol = solve_riccati(&prob).unwrap();
        for _ in 0..10 {
            let k = rng.random_range(0..prob.stages());
            let x = random_state(&mut rng, prob.dim());
            let b = log_desirability_backward(&prob, &sol, k, &x).unwrap();
            let f = log_desirability_forward(&prob, k, &x).unwrap();
            worst = worst.max((b - f).abs());
        }
    }
    assert!(worst <= 1e-8, "max |Δ log Z| = {worst:e}");
}

#[test]
fn lqr_value_modes_agree() {
    let mut rng = RngStream::new(102).rng();
    for _ in 0..100 {
        let prob = random_problem(&mut rng);
        let sol = solve_riccati(&prob).unwrap();
        let x = random_state(&mut rng, prob.dim());
        let k = rng.random_range(0..=prob.stages());
        let r = lqr_value(&prob, &sol, k, &x, LqrValueMode::Riccati).unwrap();
        let b = lqr_value(&prob, &sol, k, &x, LqrValueMode::Batch).unwrap();
        assert!((r - b).abs() <= 1e-8, "{r} vs {b}");
    }
}

#[test]
fn lqr_value_lower_bounds_grid_controls() {
    // Exhaustive search over a control grid for a 3-stage scalar problem.
    let prob = LqgProblem64::new(
        DMatrix::from_element(1, 1, 1.1),
        DMatrix::from_element(1, 1, 0.5),
        vec![DMatrix::from_element(1, 1, 2.0); 4],
        vec![DMatrix::from_element(1, 1, 0.8); 3],
    )
    .unwrap();
    let sol = solve_riccati(&prob).unwrap();
    let x0 = 1.5;
    let v = lqr_value(&prob, &sol, 0, &DVector::from_element(1, x0), LqrValueMode::Riccati).unwrap();
    let grid: Vec<f64> = (0..=160).map(|i| -4.0 + 0.05 * i as f64).collect();
    let mut best = f64::INFINITY;
    for &u0 in &grid {
        for &u1 in &grid {
            for &u2 in &grid {
                let mut x = x0;
                let mut cost = 0.0;
                for u in [u0, u1, u2] {
                    cost += 0.5 * (2.0 * x * x + u * u / 0.8);
                    x = 1.1 * x + 0.5 * u;
                }
                cost += 0.5 * 2.0 * x * x;
                best = best.min(cost);
            }
        }
    }
    assert!(best >= v - 1e-12, "grid {best} below optimum {v}");
    assert!(best - v < 5e-3, "grid {best} too far above {v}");
}

/// Standard LQR recursion with input weight R = Σ⁻¹, explicit inverses.
fn textbook_lqr_gains(prob: &LqgProblem64) -> Vec<DMatrix<f64>> {
    let (a, b) = (prob.a(), prob.b());
    let mut p = prob.q(prob.stages()).clone();
    let mut gains = vec![DMatrix::zeros(0, 0); prob.stages()];
    for k in (0..prob.stages()).rev() {
        let r = prob.sigma(k).clone().try_inverse().unwrap();
        let gain = (r + b.transpose() * &p * b).try_inverse().unwrap() * b.transpose() * &p * a;
        p = prob.q(k) + a.transpose() * &p * a - a.transpose() * &p * b * &gain;
        gains[k] = gain;
    }
    gains
}

#[test]
fn policy_mean_is_the_lqr_controller() {
    let mut rng = RngStream::new(103).rng();
    for _ in 0..100 {
        let prob = random_problem(&mut rng);
        let sol = solve_riccati(&prob).unwrap();
        let reference = textbook_lqr_gains(&prob);
        for (k, g) in reference.iter().enumerate() {
            let pol = policy_stage(&prob, &sol, k).unwrap();
            assert!((pol.gain - g).abs().max() <= 1e-10);
        }
    }
}

#[test]
fn gaussian_expectation_identity() {
    let mut rng = RngStream::new(104).rng();
    for case in 0..3 {
        let n = case + 1;
        let q = spd(&mut rng, n) * 0.5;
        let sigma = spd(&mut rng, n) * 0.5;
        let mu = random_state(&mut rng, n) * 0.5;
        let i = DMatrix::<f64>::identity(n, n);
        let iqs = &i + &q * &sigma;
        let closed = iqs.determinant().powf(-0.5)
            * (-0.5 * mu.dot(&((&i - iqs.clone().try_inverse().unwrap()) * sigma.clone().try_inverse().unwrap() * &mu))).exp();
        let l = sigma.clone().cholesky().unwrap().l();
        let samples = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mu + &l * z;
            let v = (-0.5 * x.dot(&(&q * &x))).exp();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((mean - closed).abs() <= 3.0 * se, "n={n}: {mean} vs {closed} (se {se})");
    }
}

#[test]
fn one_step_matrix_identity() {
    let mut rng = RngStream::new(105).rng();
    for _ in 0..50 {
        let n = rng.random_range(1..=3);
        let q = spd(&mut rng, n);
        let sigma = spd(&mut rng, n);
        let b = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.4..0.4));
        let i = DMatrix::<f64>::identity(n, n);
        let sb = &b * &sigma * b.transpose();
        let lhs = (&i - (&i + &q * &sb).try_inverse().unwrap()) * sb.try_inverse().unwrap();
        let rhs = &q - &q * &b * (sigma.try_inverse().unwrap() + b.transpose() * &q * &b).try_inverse().unwrap() * b.transpose() * &q;
        assert!((lhs - rhs).abs().max() <= 1e-10);
    }
}

#[test]
fn realized_kl_cost_matches_value() {
    // Average of Σ ℓ_k + KL_k + ℓ_N under the optimal policy equals -log Z(0, x0).
    let prob = LqgProblem64::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.8]),
        vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]); 11],
        vec![DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.9]); 10],
    )
    .unwrap();
    let sol = solve_riccati(&prob).unwrap();
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let value = -log_desirability_backward(&prob, &sol, 0, &x0).unwrap();
    let policies: Vec<_> = (0..10).map(|k| policy_stage(&prob, &sol, k).unwrap()).collect();
    let (a, b) = (prob.a(), prob.b());
    let kl_terms = |k: usize, x: &DVector<f64>| {
        let pol = &policies[k];
        let mean1 = a * x - b * &pol.gain * x;
        let cov1 = b * &pol.covariance * b.transpose();
        let cov0 = b * prob.sigma(k) * b.transpose();
        kl_gaussians(&mean1, &cov1, &(a * x), &cov0).unwrap()
    };
    let mut rng = RngStream::new(106).rng();
    let rollouts = 10_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..rollouts {
        let mut x = x0.clone();
        let mut cost = 0.0;
        for (k, pol) in policies.iter().enumerate() {
            cost += 0.5 * x.dot(&(prob.q(k) * &x)) + kl_terms(k, &x);
            let l = pol.covariance.clone().cholesky().unwrap().l();
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = pol.mean(&x) + l * z;
            x = a * &x + b * u;
        }
        cost += 0.5 * x.dot(&(prob.q(10) * &x));
        sum += cost;
        sum_sq += cost * cost;
    }
    let mean = sum / rollouts as f64;
    let se = ((sum_sq / rollouts as f64 - mean * mean) / rollouts as f64).sqrt();
    assert!((mean - value).abs() <= 3.0 * se, "{mean} vs {value} (se {se})");
}
