use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use paml_core::finite_mdp::{exact_values, uniform, DifferentiablePolicy, SoftmaxPolicy, TabularMdp};
use paml_core::instances::{mix_kernels, random_instance, random_kernel, random_simplex, InstanceShape};
use paml_core::seeding::rng;
use paml_core::theory_checks::{boundedness_check, convergence_constants, performance_difference, policy_change_check, q_norm};

fn gaussian(n: usize, r: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal))
}

#[test]
fn boundedness_holds_on_random_feature_draws() {
    let mut r = rng(21);
    for draw in 0..1000 {
        let nx = r.random_range(1..=4);
        let na = r.random_range(2..=4);
        let d = r.random_range(1..=6);
        let scale = r.random_range(0.1..3.0);
        let features = (0..nx).map(|_| DMatrix::from_fn(na, d, |_, _| scale * r.sample::<f64, _>(StandardNormal))).collect();
        let theta = gaussian(d, &mut r) * r.random_range(0.0..4.0);
        let policy = SoftmaxPolicy::new(features, theta).unwrap();
        for rep in boundedness_check(&policy) {
            assert!(rep.holds(), "draw {draw}: {} {} > {}", rep.check, rep.lhs, rep.rhs);
        }
    }
}

#[test]
fn beta_is_monotone_on_a_grid() {
    let bs = [0.5, 1.0, 2.0];
    let gammas = [0.0, 0.3, 0.6, 0.9, 0.99];
    let actions = [2, 3, 5];
    let qs = [0.5, 1.0, 10.0];
    let beta = |b, g, a, q| convergence_constants(b, g, a, q).unwrap().beta;
    for (i, &b) in bs.iter().enumerate() {
        for (j, &g) in gammas.iter().enumerate() {
            for (k, &a) in actions.iter().enumerate() {
                for (l, &q) in qs.iter().enumerate() {
                    let here = beta(b, g, a, q);
                    if i + 1 < bs.len() {
                        assert!(beta(bs[i + 1], g, a, q) > here);
                    }
                    if j + 1 < gammas.len() {
                        assert!(beta(b, gammas[j + 1], a, q) > here);
                    }
                    if k + 1 < actions.len() {
                        assert!(beta(b, g, actions[k + 1], q) > here);
                    }
                    if l + 1 < qs.len() {
                        assert!(beta(b, g, a, qs[l + 1]) > here);
                    }
                }
            }
        }
    }
}

fn three_state_setup(seed: u64) -> (TabularMdp, paml_core::finite_mdp::Transitions, SoftmaxPolicy) {
    let mdp = TabularMdp::three_state();
    let mut r = rng(seed);
    let model = mix_kernels(&mdp.transitions, &random_kernel(3, 2, &mut r), 0.3);
    let policy = SoftmaxPolicy::direct(3, 2).with_theta(gaussian(6, &mut r)).unwrap();
    (mdp, model, policy)
}

#[test]
fn loss_change_without_a_move_reduces_to_the_model_error() {
    let (mdp, model, policy) = three_state_setup(1);
    let rep = policy_change_check(&mdp, &model, &policy, policy.theta(), &uniform(3)).unwrap();
    let eps = rep.constants["eps_model"];
    assert!(rep.lhs <= eps + 1e-12, "{} > {eps}", rep.lhs);
    assert_eq!(rep.rhs, eps);
}

#[test]
fn loss_change_holds_for_small_moves() {
    for seed in 0..50 {
        let (mdp, model, policy) = three_state_setup(100 + seed);
        let mut r = rng(seed);
        let dir = gaussian(6, &mut r).normalize();
        let theta_prime = policy.theta() + dir * r.random_range(0.0..0.1);
        let rep = policy_change_check(&mdp, &model, &policy, &theta_prime, &uniform(3)).unwrap();
        assert!(rep.holds(), "seed {seed}: {} > {}", rep.lhs, rep.rhs);
    }
}

#[test]
fn loss_change_curve_is_continuous_at_zero() {
    let (mdp, model, policy) = three_state_setup(7);
    let dir = gaussian(6, &mut rng(8)).normalize();
    let lhs = |t: f64| {
        policy_change_check(&mdp, &model, &policy, &(policy.theta() + &dir * t), &uniform(3))
            .unwrap()
            .lhs
    };
    let at_zero = lhs(0.0);
    let steps = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
    let gaps: Vec<f64> = steps.iter().map(|&t| (lhs(t) - at_zero).abs()).collect();
    for (w, t) in gaps.windows(2).zip(steps.windows(2)) {
        assert!(w[1] <= w[0] + 1e-12, "not shrinking between {} and {}", t[0], t[1]);
    }
    assert!(gaps[5] < 1e-4, "{gaps:?}");
    // Lipschitz-like: the gap scales with the step.
    assert!(gaps[5] / 1e-6 < 10.0 * gaps[0] / 1e-1 + 1e-6);
}

#[test]
fn advantages_average_to_zero_under_the_policy() {
    for seed in 0..50 {
        let inst = random_instance(seed, InstanceShape::default());
        let probs = inst.policy.probabilities();
        let vals = exact_values(&inst.mdp.transitions, &probs, &inst.mdp.rewards, inst.mdp.gamma).unwrap();
        for x in 0..inst.mdp.n_states() {
            let s: f64 = (0..inst.mdp.n_actions()).map(|a| probs[(x, a)] * (vals.q[(x, a)] - vals.v[x])).sum();
            assert!(s.abs() < 1e-12, "seed {seed} state {x}: {s}");
        }
    }
}

#[test]
fn performance_difference_holds_on_random_pairs() {
    for seed in 0..50 {
        let inst = random_instance(seed, InstanceShape::default());
        let mut r = rng(seed + 77);
        let (nx, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let pibar = (0..nx).fold(DMatrix::zeros(nx, na), |mut m, x| {
            m.set_row(x, &random_simplex(na, &mut r).transpose());
            m
        });
        let rep = performance_difference(&inst.mdp, &pibar, &inst.policy.probabilities(), &inst.rho).unwrap();
        assert!((rep.lhs - rep.rhs).abs() <= 1e-9, "seed {seed}: {} vs {}", rep.lhs, rep.rhs);
    }
}

#[test]
fn q_norm_two_matches_double_sum() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (nx, na) = (r.random_range(1..6), r.random_range(1..4));
        let q: DMatrix<f64> = DMatrix::from_fn(nx, na, |_, _| r.random_range(-5.0..5.0));
        let q_hat: DMatrix<f64> = DMatrix::from_fn(nx, na, |_, _| r.random_range(-5.0..5.0));
        let nu = random_simplex(nx, &mut r);
        let pol = (0..nx).fold(DMatrix::zeros(nx, na), |mut m, x| {
            m.set_row(x, &random_simplex(na, &mut r).transpose());
            m
        });
        let mut acc = 0.0_f64;
        for x in 0..nx {
            for a in 0..na {
                acc += nu[x] * pol[(x, a)] * (q[(x, a)] - q_hat[(x, a)]).powi(2);
            }
        }
        let got = q_norm(&q, &q_hat, &nu, &pol, 2.0).unwrap();
        assert!((got - acc.sqrt()).abs() < 1e-12);
    }
}
