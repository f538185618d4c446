use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use paml_core::finite_mdp::{discounted_distribution, policy_kernel, DifferentiablePolicy, KernelTag, SoftmaxPolicy};
use paml_core::gradients::{projected_step, Direction, GradientCase, ProjectionSpec};
use paml_core::instances::{random_instance, random_kernel, random_simplex, InstanceShape};
use paml_core::losses::{kl_divergence, l1_distance, paml_loss_exact, Source, TrajectoryBatch};
use paml_core::lqr::{
    paml_reinforce_loss, rollout_env, AugmentMode, Augmenter, LinearGaussianPolicy, LinearModel, LqrSystem, PamlVariant,
};
use paml_core::seeding::rng;
use paml_core::theory_checks::q_norm;

fn table(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    (0..rows).fold(DMatrix::zeros(rows, cols), |mut m, x| {
        m.set_row(x, &random_simplex(cols, &mut r).transpose());
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pinsker_bounds_l1_by_kl(n in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let p: Vec<f64> = random_simplex(n, &mut r).iter().copied().collect();
        let q: Vec<f64> = random_simplex(n, &mut r).iter().copied().collect();
        let kl = kl_divergence(&p, &q);
        prop_assert!(kl >= 0.0);
        prop_assert!(l1_distance(&p, &q) <= (2.0 * kl).sqrt() + 1e-12);
    }

    #[test]
    fn q_norm_grows_with_the_order(nx in 1usize..5, na in 1usize..4, seed in any::<u64>(), p in 1.0f64..6.0, dp in 0.0f64..4.0) {
        let mut r = rng(seed);
        let q = DMatrix::from_fn(nx, na, |_, _| r.random_range(-3.0..3.0));
        let q_hat = DMatrix::zeros(nx, na);
        let nu = random_simplex(nx, &mut r);
        let pol = table(nx, na, seed ^ 1);
        let lo = q_norm(&q, &q_hat, &nu, &pol, p).unwrap();
        let hi = q_norm(&q, &q_hat, &nu, &pol, p + dp).unwrap();
        prop_assert!(lo <= hi + 1e-12, "{} > {}", lo, hi);
    }

    #[test]
    fn augmentation_keeps_the_state_in_front(mode_idx in 0usize..6, n in 1usize..6, seed in any::<u64>(), t in 0usize..50, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0) {
        let mut r = rng(seed);
        let aug = Augmenter::new(AugmentMode::ALL[mode_idx], n, 2, &mut r);
        let x = DVector::from_vec(vec![x0, x1]);
        let noise = aug.start_episode(&mut r);
        let obs = aug.observe(&x, t, &noise, &mut r);
        prop_assert_eq!(obs.len(), aug.obs_dim());
        prop_assert_eq!(obs.rows(0, 2).into_owned(), x);
    }

    #[test]
    fn exact_paml_loss_is_nonnegative(seed in 0u64..10_000, case_idx in 0usize..3) {
        let inst = random_instance(seed, InstanceShape::default());
        let loss = paml_loss_exact(&inst.mdp, &inst.model, &inst.policy, &inst.rho, GradientCase::ALL[case_idx]).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn discounted_distribution_is_a_distribution(n in 1usize..7, na in 1usize..4, seed in any::<u64>(), gamma in 0.0f64..0.99) {
        let mut r = rng(seed);
        let kernel = random_kernel(n, na, &mut r);
        let pol = table(n, na, seed ^ 2);
        let rho = random_simplex(n, &mut r);
        let d = discounted_distribution(&policy_kernel(&kernel, &pol).unwrap(), &rho, gamma, KernelTag::True).unwrap();
        prop_assert!((d.weights.sum() - 1.0).abs() < 1e-10);
        for (w, p) in d.weights.iter().zip(rho.iter()) {
            prop_assert!(*w >= (1.0 - gamma) * p - 1e-12);
        }
    }

    #[test]
    fn projected_steps_stay_in_the_ball(dim in 1usize..8, seed in any::<u64>(), radius in 0.01f64..10.0, eta in 1e-3f64..10.0, ascend in any::<bool>()) {
        let mut r = rng(seed);
        let proj = ProjectionSpec::ball(radius);
        let theta = proj.project(DVector::from_fn(dim, |_, _| r.random_range(-20.0..20.0)));
        let g = DVector::from_fn(dim, |_, _| r.random_range(-20.0..20.0));
        let dir = if ascend { Direction::Ascend } else { Direction::Descend };
        let next = projected_step(&theta, &g, eta, proj, dir).unwrap();
        prop_assert!(proj.contains(&next));
    }

    #[test]
    fn softmax_rows_are_distributions(nx in 1usize..5, na in 1usize..5, seed in any::<u64>(), scale in 0.0f64..50.0) {
        let mut r = rng(seed);
        let theta = DVector::from_fn(nx * na, |_, _| scale * r.random_range(-1.0..1.0));
        let probs = SoftmaxPolicy::direct(nx, na).with_theta(theta).unwrap().probabilities();
        for row in probs.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lqr_paml_loss_is_nonnegative(seed in any::<u64>(), perturb in -0.2f64..0.2, variant_first in any::<bool>()) {
        let sys = LqrSystem::standard();
        let mut r = rng(seed);
        let aug = Augmenter::new(AugmentMode::None, 0, 2, &mut r);
        let policy = LinearGaussianPolicy::zeros(2, 2, -0.5);
        let eps = (0..3)
            .map(|_| {
                let x0 = DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
                rollout_env(&sys, &aug, &policy, &x0, 20, &mut r).unwrap().episode
            })
            .collect();
        let real = TrajectoryBatch::new(eps, 20, Source::Real).unwrap();
        let mut model = LinearModel::perfect(&sys);
        model.m[(0, 0)] += perturb;
        let variant = if variant_first { PamlVariant::AverageFirst } else { PamlVariant::PerStart };
        let loss = paml_reinforce_loss(&sys, &real, &model, &policy, 1.0, variant).unwrap();
        prop_assert!(loss >= 0.0);
    }
}
