//! Seeded random tabular instances for sweeps and property checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, Gamma, StandardNormal};

use crate::finite_mdp::{SoftmaxPolicy, TabularMdp, Transitions};
use crate::seeding::rng;

/// An MDP, a model of it, a policy and two state distributions.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub mdp: TabularMdp,
    pub model: Transitions,
    pub policy: SoftmaxPolicy,
    pub rho: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Size and discount ranges for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub max_states: usize,
    pub max_actions: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            max_states: 5,
            max_actions: 3,
        }
    }
}

/// Uniform draw from the probability simplex.
pub fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(Exp1));
    let s = v.sum();
    v / s
}

/// Kernel with every row drawn uniformly from the simplex.
pub fn random_kernel<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Transitions {
    let per_action = (0..n_actions)
        .map(|_| {
            let mut m = DMatrix::zeros(n_states, n_states);
            for x in 0..n_states {
                m.set_row(x, &random_simplex(n_states, rng).transpose());
            }
            m
        })
        .collect();
    Transitions::new_unchecked(per_action).expect("square blocks")
}

/// Kernel with rows from a symmetric Dirichlet of concentration `alpha`;
/// small `alpha` gives rows with near-zero entries.
pub fn dirichlet_kernel<R: Rng>(n_states: usize, n_actions: usize, alpha: f64, rng: &mut R) -> Transitions {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let per_action = (0..n_actions)
        .map(|_| {
            let mut m = DMatrix::zeros(n_states, n_states);
            for x in 0..n_states {
                let row = DVector::from_fn(n_states, |_, _| rng.sample::<f64, _>(gamma).max(1e-300));
                m.set_row(x, &(&row / row.sum()).transpose());
            }
            m
        })
        .collect();
    Transitions::new_unchecked(per_action).expect("square blocks")
}

/// Rows `∝ P^κ`; for `κ > 1` small entries shrink much faster than they do
/// in total variation, so KL grows large relative to TV.
pub fn temper_kernel(p: &Transitions, kappa: f64) -> Transitions {
    let per_action = (0..p.n_actions())
        .map(|a| {
            let mut m = p.action(a).map(|v| v.powf(kappa).max(1e-300));
            for mut row in m.row_iter_mut() {
                let s = row.sum();
                row /= s;
            }
            m
        })
        .collect();
    Transitions::new_unchecked(per_action).expect("same shapes")
}

/// `(1 − ε) P + ε Q` row by row.
pub fn mix_kernels(p: &Transitions, q: &Transitions, eps: f64) -> Transitions {
    let per_action = (0..p.n_actions())
        .map(|a| p.action(a) * (1.0 - eps) + q.action(a) * eps)
        .collect();
    Transitions::new_unchecked(per_action).expect("same shapes")
}

/// Random MDP with `|X| ≤ 5`, `|A| ≤ 3` by default; random model, policy,
/// start and weighting distributions. About 30% of the true
/// kernels are peaked and a quarter of the models are tempered copies of the
/// truth, which makes KL large relative to TV. Half of the policies use one-hot
/// features, the rest dense Gaussian features of dimension 2 to 6. About
/// one in eight weighting distributions leaves a state uncovered.
pub fn random_instance(seed: u64, shape: InstanceShape) -> Instance {
    let mut r = rng(seed);
    let nx = r.random_range(2..=shape.max_states.max(2));
    let na = r.random_range(2..=shape.max_actions.max(2));
    let gamma = r.random_range(0.3..0.97);
    let kernel = if r.random_bool(0.3) {
        dirichlet_kernel(nx, na, 0.15, &mut r)
    } else {
        random_kernel(nx, na, &mut r)
    };
    let rewards = DMatrix::from_fn(nx, na, |_, _| r.random_range(-1.0..1.0));
    let mdp = TabularMdp::new(kernel, rewards, gamma).expect("random kernels are stochastic");
    let model = if r.random_bool(0.25) {
        temper_kernel(&mdp.transitions, r.random_range(1.2..4.0))
    } else {
        let noise = random_kernel(nx, na, &mut r);
        mix_kernels(&mdp.transitions, &noise, r.random_range(0.02..1.0))
    };
    let policy = if r.random_bool(0.5) {
        let d = nx * na;
        SoftmaxPolicy::direct(nx, na)
            .with_theta(DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal)))
            .expect("matching dimension")
    } else {
        let d = r.random_range(2..=6);
        let scale = r.random_range(0.2..2.0);
        let features = (0..nx)
            .map(|_| DMatrix::from_fn(na, d, |_, _| scale * r.sample::<f64, _>(StandardNormal)))
            .collect();
        let theta = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        SoftmaxPolicy::new(features, theta).expect("consistent shapes")
    };
    let rho = random_simplex(nx, &mut r);
    let mut nu = random_simplex(nx, &mut r);
    if r.random_bool(0.125) {
        let x = r.random_range(0..nx);
        nu[x] = 0.0;
        let s = nu.sum();
        nu /= s;
    }
    Instance {
        seed,
        mdp,
        model,
        policy,
        rho,
        nu,
    }
}
