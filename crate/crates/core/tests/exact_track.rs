use nalgebra::{DMatrix, DVector};
use rand::Rng;

use paml_core::finite_mdp::{
    exact_values, policy_kernel, policy_performance, uniform, DifferentiablePolicy, SoftmaxPolicy, TabularMdp, Transitions,
};
use paml_core::gradients::GradientCase;
use paml_core::instances::{random_instance, InstanceShape};
use paml_core::losses::{empirical_paml_loss, kl_and_tv, paml_loss_exact, sample_index, sample_tabular_batch, Source};
use paml_core::model_learning::{fit_model_steps, on_policy_weights, KlForm, Objective, TabularModel, TrainConfig};
use paml_core::seeding::rng;

fn value_iteration(mdp: &TabularMdp, probs: &DMatrix<f64>, iters: usize) -> DVector<f64> {
    let n = mdp.n_states();
    let mut v = DVector::zeros(n);
    for _ in 0..iters {
        let mut next = DVector::zeros(n);
        for x in 0..n {
            for a in 0..mdp.n_actions() {
                let cont: f64 = (0..n).map(|y| mdp.transitions.prob(a, x, y) * v[y]).sum();
                next[x] += probs[(x, a)] * (mdp.rewards[(x, a)] + mdp.gamma * cont);
            }
        }
        v = next;
    }
    v
}

#[test]
fn linear_solve_matches_value_iteration_on_random_mdps() {
    let shape = InstanceShape {
        max_states: 6,
        max_actions: 3,
    };
    for seed in 0..100 {
        let inst = random_instance(seed, shape);
        let probs = inst.policy.probabilities();
        let exact = exact_values(&inst.mdp.transitions, &probs, &inst.mdp.rewards, inst.mdp.gamma).unwrap();
        let vi = value_iteration(&inst.mdp, &probs, 2000);
        assert!((&exact.v - &vi).amax() < 1e-8, "seed {seed}");
    }
}

#[test]
fn three_state_value_matches_monte_carlo() {
    let mdp = TabularMdp::three_state();
    let probs = DMatrix::from_element(3, 2, 0.5);
    let exact = policy_performance(&mdp.transitions, &probs, &mdp.rewards, mdp.gamma, &uniform(3)).unwrap();
    let mut r = rng(3);
    let n = 100_000;
    let horizon = 320;
    let returns: Vec<f64> = (0..n)
        .map(|_| {
            let mut x = r.random_range(0..3);
            let (mut g, mut disc) = (0.0, 1.0);
            for _ in 0..horizon {
                let a = r.random_range(0..2);
                g += disc * mdp.rewards[(x, a)];
                disc *= mdp.gamma;
                x = sample_index(mdp.transitions.row(x, a).iter().copied(), &mut r);
            }
            g
        })
        .collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "MC {mean} exact {exact} se {se}");
}

/// `∂π(a|x)/∂θ_{x,b} = π(a|x)(1{a=b} − π(b|x))` for the direct softmax.
fn direct_prob_gradient(probs: &DMatrix<f64>, x: usize, a: usize) -> DVector<f64> {
    let (nx, na) = probs.shape();
    DVector::from_fn(nx * na, |i, _| {
        let (y, b) = (i / na, i % na);
        if y != x {
            0.0
        } else {
            probs[(x, a)] * (if a == b { 1.0 } else { 0.0 } - probs[(x, b)])
        }
    })
}

/// `Σ_{k<K} γ^k Σ_x (ρᵀ(P₁^π)^k)(x) Σ_a ∇π(a|x) Q₂(x,a)` with `V₂` from its own truncated series.
fn series_gradient(mdp: &TabularMdp, dist: &Transitions, critic: &Transitions, probs: &DMatrix<f64>, rho: &DVector<f64>) -> DVector<f64> {
    let (nx, na) = probs.shape();
    let terms = 2000;
    let p1 = policy_kernel(dist, probs).unwrap();
    let p2 = policy_kernel(critic, probs).unwrap();
    let r_pi = DVector::from_fn(nx, |x, _| (0..na).map(|a| probs[(x, a)] * mdp.rewards[(x, a)]).sum());
    let mut v = DVector::zeros(nx);
    let mut term = r_pi.clone();
    let mut disc = 1.0;
    for _ in 0..terms {
        v += &term * disc;
        term = &p2 * term;
        disc *= mdp.gamma;
    }
    let q = DMatrix::from_fn(nx, na, |x, a| mdp.rewards[(x, a)] + mdp.gamma * critic.row(x, a).dot(&v));
    let mut g = DVector::zeros(nx * na);
    let mut occ = rho.transpose().into_owned();
    let mut disc = 1.0;
    for _ in 0..terms {
        for x in 0..nx {
            for a in 0..na {
                g += direct_prob_gradient(probs, x, a) * (disc * occ[x] * q[(x, a)]);
            }
        }
        occ *= &p1;
        disc *= mdp.gamma;
    }
    g
}

#[test]
fn exact_loss_matches_truncated_series_on_two_state() {
    let mdp = TabularMdp::two_state();
    let mut r = rng(5);
    let perturbed: Vec<DMatrix<f64>> = (0..2)
        .map(|a| {
            let logits = mdp.transitions.action(a).map(|p| p.ln() + 0.5 * r.random::<f64>());
            let mut m = logits.map(f64::exp);
            for mut row in m.row_iter_mut() {
                let s = row.sum();
                row /= s;
            }
            m
        })
        .collect();
    let model = Transitions::new(perturbed).unwrap();
    let policy = SoftmaxPolicy::direct(2, 2);
    let probs = policy.probabilities();
    let rho = uniform(2);
    let truth = series_gradient(&mdp, &mdp.transitions, &mdp.transitions, &probs, &rho);
    for case in GradientCase::ALL {
        let (p1, p2) = case.kernels(&mdp.transitions, &model);
        let oracle = (&truth - series_gradient(&mdp, p1, p2, &probs, &rho)).norm();
        let loss = paml_loss_exact(&mdp, &model, &policy, &rho, case).unwrap();
        assert!((loss - oracle).abs() < 1e-8, "case {}: {loss} vs {oracle}", case.tag());
        assert!(loss > 1e-4);
    }
}

#[test]
fn deterministic_model_with_shared_seeds_has_zero_empirical_loss() {
    let per_action = vec![
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    ];
    let kernel = Transitions::new(per_action).unwrap();
    let rewards = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 0.2, 0.3]);
    let mdp = TabularMdp::new(kernel.clone(), rewards, 0.8).unwrap();
    let policy = SoftmaxPolicy::direct(3, 2).with_theta(DVector::from_vec(vec![0.3, -0.2, 1.0, 0.0, -0.5, 0.4])).unwrap();
    let probs = policy.probabilities();
    let q = exact_values(&mdp.transitions, &probs, &mdp.rewards, mdp.gamma).unwrap().q;
    let starts = [0, 1, 2, 2, 0];
    let real = sample_tabular_batch(&mdp.transitions, &mdp.rewards, &probs, &starts, 30, Source::Real, &mut rng(9));
    let sim = sample_tabular_batch(&kernel, &mdp.rewards, &probs, &starts, 30, Source::Model, &mut rng(9));
    assert_eq!(empirical_paml_loss(&real, &sim, &q, &policy, mdp.gamma).unwrap(), 0.0);

    let other = sample_tabular_batch(&kernel, &mdp.rewards, &probs, &starts, 30, Source::Model, &mut rng(10));
    assert!(empirical_paml_loss(&real, &other, &q, &policy, mdp.gamma).unwrap() > 0.0);
}

#[test]
fn unconstrained_kl_fit_recovers_the_kernel() {
    let mdp = TabularMdp::three_state();
    let policy = SoftmaxPolicy::direct(3, 2);
    let rho = uniform(3);
    let config = TrainConfig {
        objective: Objective::Kl,
        kl_form: KlForm::StateAction,
        ..TrainConfig::default()
    };
    let fit = fit_model_steps(&mdp, &policy, &rho, &TabularModel::zeros(3, 2), &config, 20_000, 1.0).unwrap();
    let probs = policy.probabilities();
    let nu = on_policy_weights(&mdp, &probs, &rho).unwrap();
    let truth = policy_kernel(&mdp.transitions, &probs).unwrap();
    let model = policy_kernel(&fit.transitions(), &probs).unwrap();
    let kl = kl_and_tv(&truth, &model, &nu).unwrap().kl_avg;
    assert!(kl <= 1e-4, "KL {kl}");
}

#[test]
fn unconstrained_paml_fit_reaches_zero_loss() {
    let mdp = TabularMdp::three_state();
    let policy = SoftmaxPolicy::direct(3, 2);
    let rho = uniform(3);
    let config = TrainConfig::default();
    let fit = fit_model_steps(&mdp, &policy, &rho, &TabularModel::zeros(3, 2), &config, 20_000, 0.5).unwrap();
    let loss = paml_loss_exact(&mdp, &fit.transitions(), &policy, &rho, config.gradient_case).unwrap();
    assert!(loss <= 1e-6, "PAML loss {loss}");
}
