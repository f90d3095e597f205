use kl_control::finite_mdp::*;
use kl_control::{FiniteMdp64, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

fn random_mdp(rng: &mut impl Rng, states: usize, stages: usize) -> FiniteMdp64 {
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
    FiniteMdp64::new(transitions, costs).unwrap()
}

/// Σ over all reference paths of P⁰(path) exp(-Σ ℓ).
fn enumerate_desirability(mdp: &FiniteMdp64, x0: usize) -> f64 {
    fn walk(mdp: &FiniteMdp64, k: usize, x: usize, prob: f64, cost: f64) -> f64 {
        let cost = cost + mdp.cost(k)[x];
        if k == mdp.stages() {
            return prob * (-cost).exp();
        }
        (0..mdp.states())
            .map(|y| {
                let p = mdp.transition(k)[(x, y)];
                if p == 0.0 { 0.0 } else { walk(mdp, k + 1, y, prob * p, cost) }
            })
            .sum()
    }
    walk(mdp, 0, x0, 1.0, 0.0)
}

/// Exact E[ℓ_N + Σ (ℓ_k + KL(p_k(·|x) || p⁰_k(·|x)))] from x0.
fn exact_total_cost(mdp: &FiniteMdp64, policy: &[DMatrix<f64>], x0: usize) -> f64 {
    let n = mdp.states();
    let mut dist = DVector::zeros(n);
    dist[x0] = 1.0;
    let mut total = 0.0;
    for k in 0..mdp.stages() {
        let p0 = mdp.transition(k);
        for x in 0..n {
            if dist[x] == 0.0 {
                continue;
            }
            let kl: f64 = (0..n)
                .filter(|&y| policy[k][(x, y)] > 0.0)
                .map(|y| policy[k][(x, y)] * (policy[k][(x, y)] / p0[(x, y)]).ln())
                .sum();
            total += dist[x] * (mdp.cost(k)[x] + kl);
        }
        dist = policy[k].transpose() * dist;
    }
    total + dist.dot(mdp.cost(mdp.stages()))
}

fn optimal_policy(mdp: &FiniteMdp64, table: &DesirabilityTable<f64>) -> Vec<DMatrix<f64>> {
    (0..mdp.stages())
        .map(|k| {
            let mut p = DMatrix::zeros(mdp.states(), mdp.states());
            for x in 0..mdp.states() {
                p.set_row(x, &optimal_transition(mdp, table, k, x).unwrap().transpose());
            }
            p
        })
        .collect()
}

#[test]
fn desirability_equals_path_enumeration() {
    let mut rng = RngStream::new(61).rng();
    for _ in 0..20 {
        let mdp = random_mdp(&mut rng, 4, 5);
        let table = solve_desirability(&mdp).unwrap();
        for x in 0..4 {
            let brute = enumerate_desirability(&mdp, x);
            assert!((table.log_z(0, x).exp() - brute).abs() <= 1e-12);
        }
    }
}

#[test]
fn optimal_rows_beat_dirichlet_perturbations() {
    let mut rng = RngStream::new(62).rng();
    let mdp = random_mdp(&mut rng, 4, 5);
    let table = solve_desirability(&mdp).unwrap();
    let best = optimal_policy(&mdp, &table);
    let x0 = 0;
    let optimal_cost = exact_total_cost(&mdp, &best, x0);
    assert!((optimal_cost - exact_value(&table, 0, x0)).abs() < 1e-12);
    for _ in 0..100 {
        let perturbed: Vec<DMatrix<f64>> = best
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for mut row in q.row_iter_mut() {
                    for v in row.iter_mut() {
                        if *v > 0.0 {
                            *v = Gamma::new(50.0 * *v, 1.0).unwrap().sample(&mut rng).max(1e-300);
                        }
                    }
                    let s = row.sum();
                    row /= s;
                }
                q
            })
            .collect();
        assert!(optimal_cost <= exact_total_cost(&mdp, &perturbed, x0) + 1e-12);
    }
}

#[test]
fn desirability_is_linear_in_terminal_condition() {
    let mut rng = RngStream::new(63).rng();
    let mdp = random_mdp(&mut rng, 5, 6);
    let a = DVector::from_fn(5, |_, _| rng.random_range(0.1..2.0));
    let b = DVector::from_fn(5, |_, _| rng.random_range(0.1..2.0));
    let za = propagate_log_desirability(&mdp, a.map(f64::ln)).unwrap();
    let zb = propagate_log_desirability(&mdp, b.map(f64::ln)).unwrap();
    let zab = propagate_log_desirability(&mdp, (&a + &b).map(f64::ln)).unwrap();
    for k in 0..=6 {
        for x in 0..5 {
            let sum = za.log_z(k, x).exp() + zb.log_z(k, x).exp();
            assert!((sum - zab.log_z(k, x).exp()).abs() <= 1e-12);
        }
    }
}

#[test]
fn optimal_cost_decomposes_over_visited_stages() {
    let mut rng = RngStream::new(64).rng();
    let mdp = random_mdp(&mut rng, 4, 4);
    let table = solve_desirability(&mdp).unwrap();
    let policy = optimal_policy(&mdp, &table);
    let x0 = 2;
    let mut dist = DVector::zeros(4);
    dist[x0] = 1.0;
    let mut decomposed = 0.0;
    for k in 0..4 {
        for x in 0..4 {
            decomposed += dist[x] * (mdp.cost(k)[x] - log_expected_desirability(&mdp, &table, k, x));
        }
        dist = policy[k].transpose() * dist;
        // Realized KL term is log z(k+1, x') - log 𝔸[z](k, x) along each transition.
        decomposed += dist.dot(&table.log_z[k + 1]);
    }
    decomposed += dist.dot(mdp.cost(4));
    assert!((decomposed - exact_total_cost(&mdp, &policy, x0)).abs() < 1e-12);
    assert!((decomposed - exact_value(&table, 0, x0)).abs() < 1e-12);
}

#[test]
fn value_matches_monte_carlo_on_reference_chain() {
    let mut rng = RngStream::new(65).rng();
    let mdp = random_mdp(&mut rng, 4, 5);
    let table = solve_desirability(&mdp).unwrap();
    let samples = 100_000;
    let x0 = 1;
    let weights: Vec<f64> = (0..samples)
        .map(|_| {
            let mut x = x0;
            let mut cost = mdp.cost(0)[x];
            for k in 0..5 {
                let u: f64 = rng.random();
                let row = mdp.transition(k).row(x);
                let mut acc = 0.0;
                let mut next = 3;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                x = next;
                cost += mdp.cost(k + 1)[x];
            }
            (-cost).exp()
        })
        .collect();
    let mean = weights.iter().sum::<f64>() / samples as f64;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let se_log = (var / samples as f64).sqrt() / mean;
    assert!((-mean.ln() - exact_value(&table, 0, x0)).abs() <= 3.0 * se_log);
}
