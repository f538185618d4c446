//! Model-learning objectives and kernel distances.
//!
//! Total variation is reported as the plain ℓ₁ distance between rows
//! (`Σ_{x'} |ΔP^π(x'|x)|`), without a factor ½. KL uses the natural log and is
//! `+∞` wherever the model assigns zero mass to a reachable next state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::finite_mdp::{DifferentiablePolicy, SoftmaxPolicy, TabularMdp, Transitions};
use crate::gradients::{gradient_report, GradientCase};
use crate::lqr::LinearModel;
use crate::{Error, Result};

/// `‖∇J(P*,P*) − ∇J_case‖₂`.
pub fn paml_loss_exact<P: DifferentiablePolicy + ?Sized>(
    mdp: &TabularMdp,
    model: &Transitions,
    policy: &P,
    rho: &DVector<f64>,
    case: GradientCase,
) -> Result<f64> {
    Ok(gradient_report(mdp, model, policy, rho, case)?.paml_loss)
}

/// KL and TV aggregates between two policy-induced kernels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    /// Filled in by callers that also evaluate the gradient loss; 0 otherwise.
    pub paml: f64,
    pub kl_avg: f64,
    pub kl_sup: f64,
    pub tv_avg: f64,
    pub tv_sup: f64,
    pub kl_per_state: Vec<f64>,
    pub tv_per_state: Vec<f64>,
    pub nu: Vec<f64>,
}

/// `KL(p‖q) = Σ p ln(p/q)`; terms with `p = 0` vanish, `q = 0 < p` gives `+∞`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else if qi <= 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// `Σ |p − q|`.
pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Per-state TV and KL between `P^π` (`true_kernel`) and `P̂^π`, aggregated
/// as a ν-average and a supremum over states.
pub fn kl_and_tv(true_kernel: &DMatrix<f64>, model_kernel: &DMatrix<f64>, nu: &DVector<f64>) -> Result<LossReport> {
    let n = true_kernel.nrows();
    if model_kernel.shape() != true_kernel.shape() {
        return Err(Error::DimensionMismatch {
            what: "model kernel size",
            expected: true_kernel.len(),
            got: model_kernel.len(),
        });
    }
    if nu.len() != n {
        return Err(Error::DimensionMismatch {
            what: "weighting distribution",
            expected: n,
            got: nu.len(),
        });
    }
    let mut kl = Vec::with_capacity(n);
    let mut tv = Vec::with_capacity(n);
    for x in 0..n {
        let p: Vec<f64> = true_kernel.row(x).iter().copied().collect();
        let q: Vec<f64> = model_kernel.row(x).iter().copied().collect();
        kl.push(kl_divergence(&p, &q));
        tv.push(l1_distance(&p, &q));
    }
    let weighted = |v: &[f64]| -> f64 {
        v.iter()
            .zip(nu.iter())
            .filter(|(_, w)| **w > 0.0)
            .map(|(val, w)| val * w)
            .sum()
    };
    Ok(LossReport {
        paml: 0.0,
        kl_avg: weighted(&kl),
        kl_sup: kl.iter().copied().fold(0.0, f64::max),
        tv_avg: weighted(&tv),
        tv_sup: tv.iter().copied().fold(0.0, f64::max),
        kl_per_state: kl,
        tv_per_state: tv,
        nu: nu.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step<S, A> {
    pub state: S,
    pub action: A,
    pub reward: f64,
    pub next_state: S,
}

pub type Episode<S, A> = Vec<Step<S, A>>;

/// Episodes of `(state, action, reward, next_state)` tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch<S, A> {
    pub episodes: Vec<Episode<S, A>>,
    pub horizon: usize,
    pub source: Source,
}

impl<S: Clone, A> TrajectoryBatch<S, A> {
    pub fn new(episodes: Vec<Episode<S, A>>, horizon: usize, source: Source) -> Result<Self> {
        if episodes.iter().any(|e| e.len() > horizon) {
            return Err(Error::InvalidArgument(format!("episode longer than horizon {horizon}")));
        }
        Ok(Self {
            episodes,
            horizon,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Start state of every non-empty episode.
    pub fn start_states(&self) -> Vec<Option<S>> {
        self.episodes.iter().map(|e| e.first().map(|s| s.state.clone())).collect()
    }
}

pub type TabularBatch = TrajectoryBatch<usize, usize>;

/// Index drawn from `probs` by inverse CDF with a single uniform variate.
pub fn sample_index<R: Rng>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Simulates one `horizon`-step episode per start state.
pub fn sample_tabular_batch<R: Rng>(
    kernel: &Transitions,
    rewards: &DMatrix<f64>,
    policy: &DMatrix<f64>,
    starts: &[usize],
    horizon: usize,
    source: Source,
    rng: &mut R,
) -> TabularBatch {
    let episodes = starts
        .iter()
        .map(|&x0| {
            let mut x = x0;
            (0..horizon)
                .map(|_| {
                    let a = sample_index(policy.row(x).iter().copied(), rng);
                    let next = sample_index(kernel.action(a).row(x).iter().copied(), rng);
                    let step = Step {
                        state: x,
                        action: a,
                        reward: rewards[(x, a)],
                        next_state: next,
                    };
                    x = next;
                    step
                })
                .collect()
        })
        .collect();
    TrajectoryBatch {
        episodes,
        horizon,
        source,
    }
}

/// Per-episode average of `Σ_{k=1..T} γ^k 1{X_k = x, A_k = a}`, with the
/// first step of each episode carrying `k = 1`.
pub fn discounted_occupancy(batch: &TabularBatch, n_states: usize, n_actions: usize, gamma: f64) -> Result<DMatrix<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut w = DMatrix::zeros(n_states, n_actions);
    for ep in &batch.episodes {
        let mut g = gamma;
        for step in ep {
            if step.state >= n_states || step.action >= n_actions {
                return Err(Error::InvalidArgument(format!(
                    "step ({}, {}) outside the declared spaces",
                    step.state, step.action
                )));
            }
            w[(step.state, step.action)] += g;
            g *= gamma;
        }
    }
    Ok(w / batch.len() as f64)
}

/// `‖Σ_{x,a} (W_real − W_model)(x,a) ∇log π(a|x) Q̂(x,a)‖₂` for discounted occupancies.
pub fn paml_loss_from_occupancies(
    real: &DMatrix<f64>,
    model: &DMatrix<f64>,
    q_hat: &DMatrix<f64>,
    policy: &SoftmaxPolicy,
) -> f64 {
    let mut g = DVector::zeros(policy.dim());
    for x in 0..real.nrows() {
        for a in 0..real.ncols() {
            let w = real[(x, a)] - model[(x, a)];
            if w != 0.0 {
                g.axpy(w * q_hat[(x, a)], &policy.score(x, a), 1.0);
            }
        }
    }
    g.norm()
}

/// Empirical gradient-matching loss.
///
/// `model_rollouts` holds `m` episodes per real episode, stored consecutively:
/// episodes `i·m .. (i+1)·m` must start where real episode `i` starts. Since
/// the inner average over `j` and the outer over `i` are plain means, the loss
/// equals the distance between the per-episode mean discounted score-critic
/// sums of the two batches; the model branch evaluates the score and critic
/// at the model's own states.
pub fn empirical_paml_loss(
    real: &TabularBatch,
    model_rollouts: &TabularBatch,
    q_hat: &DMatrix<f64>,
    policy: &SoftmaxPolicy,
    gamma: f64,
) -> Result<f64> {
    if real.is_empty() || model_rollouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !model_rollouts.len().is_multiple_of(real.len()) {
        return Err(Error::InvalidArgument(format!(
            "{} model episodes cannot be split evenly over {} real episodes",
            model_rollouts.len(),
            real.len()
        )));
    }
    let m = model_rollouts.len() / real.len();
    let real_starts = real.start_states();
    for (idx, start) in model_rollouts.start_states().into_iter().enumerate() {
        if start != real_starts[idx / m] {
            return Err(Error::StartStateMismatch(idx));
        }
    }
    let (nx, na) = (policy.n_states(), policy.n_actions());
    let w_real = discounted_occupancy(real, nx, na, gamma)?;
    let w_model = discounted_occupancy(model_rollouts, nx, na, gamma)?;
    Ok(paml_loss_from_occupancies(&w_real, &w_model, q_hat, policy))
}

/// Draws `n` trials over `probs` as sequential binomials.
fn multinomial<R: Rng>(n: u64, probs: impl Iterator<Item = f64>, rng: &mut R) -> Vec<u64> {
    let probs: Vec<f64> = probs.collect();
    let mut out = vec![0; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let c = if mass <= p || i + 1 == probs.len() {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(remaining, (p / mass).min(1.0)).expect("valid binomial").sample(rng)
        };
        out[i] = c;
        remaining -= c;
        mass -= p;
    }
    out
}

/// Discounted occupancy of `m` rollouts per start state, sampled without
/// simulating individual trajectories.
///
/// Rollouts are independent given their start states, and the occupancy
/// only depends on how many chains visit each `(k, x, a)`. Those counts are
/// drawn by splitting state counts over actions and next states with
/// multinomials, which has the same law as running every chain separately.
pub fn sample_model_occupancy<R: Rng>(
    kernel: &Transitions,
    policy: &DMatrix<f64>,
    starts: &[usize],
    m: u64,
    horizon: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if starts.is_empty() || m == 0 {
        return Err(Error::EmptyBatch);
    }
    let (nx, na) = (kernel.n_states(), kernel.n_actions());
    let mut counts = vec![0u64; nx];
    for &x in starts {
        counts[x] += m;
    }
    let mut w = DMatrix::zeros(nx, na);
    let mut g = gamma;
    for _ in 0..horizon {
        let mut next = vec![0u64; nx];
        for x in 0..nx {
            if counts[x] == 0 {
                continue;
            }
            let per_action = multinomial(counts[x], policy.row(x).iter().copied(), rng);
            for (a, &c) in per_action.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                w[(x, a)] += g * c as f64;
                for (y, k) in multinomial(c, kernel.action(a).row(x).iter().copied(), rng).into_iter().enumerate() {
                    next[y] += k;
                }
            }
        }
        counts = next;
        g *= gamma;
    }
    Ok(w / (starts.len() as f64 * m as f64))
}

/// Multi-step prediction loss of a delta model on continuous-state episodes.
///
/// For every episode and every start offset `t ≤ len − H`, the model is
/// rolled forward open loop from the observed state using the recorded
/// actions; the loss is the mean over `(episode, t)` of
/// `Σ_{h=1..H} ‖ΔX̂_{t+h} − ΔX_{t+h}‖²`, where deltas are consecutive
/// differences of predicted and observed states respectively.
pub fn mle_multistep_loss(
    real: &TrajectoryBatch<DVector<f64>, DVector<f64>>,
    model: &LinearModel,
    horizon: usize,
) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for ep in &real.episodes {
        if horizon > ep.len() {
            return Err(Error::HorizonTooLong {
                horizon,
                length: ep.len(),
            });
        }
        for t in 0..=ep.len() - horizon {
            let mut pred = ep[t].state.clone();
            for step in &ep[t..t + horizon] {
                let delta = model.predict_delta(&pred, &step.action);
                let observed = &step.next_state - &step.state;
                total += (&delta - observed).norm_squared();
                pred += delta;
            }
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_mdp::{policy_kernel, uniform};
    use crate::seeding::rng;

    #[test]
    fn identical_kernels_give_zero_losses() {
        let mdp = TabularMdp::three_state();
        let k = policy_kernel(&mdp.transitions, &DMatrix::from_element(3, 2, 0.5)).unwrap();
        let rep = kl_and_tv(&k, &k, &uniform(3)).unwrap();
        assert_eq!((rep.kl_avg, rep.kl_sup, rep.tv_avg, rep.tv_sup), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn two_point_rows() {
        let p = DMatrix::from_row_slice(1, 2, &[0.7, 0.3]);
        let q = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let rep = kl_and_tv(&p, &q, &DVector::from_element(1, 1.0)).unwrap();
        assert!((rep.tv_sup - 0.4).abs() < 1e-15);
        let kl = 0.7 * (1.4f64).ln() + 0.3 * (0.6f64).ln();
        assert!((rep.kl_sup - kl).abs() < 1e-15);
    }

    #[test]
    fn zero_model_mass_gives_infinite_kl() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let rep = kl_and_tv(&p, &q, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert!(rep.kl_sup.is_infinite() && rep.kl_avg.is_infinite());
        assert_eq!(rep.kl_per_state[1], 0.0);
        let rep = kl_and_tv(&p, &q, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(rep.kl_avg, 0.0);
    }

    #[test]
    fn perfect_model_has_zero_exact_loss() {
        let mdp = TabularMdp::two_state();
        let pol = SoftmaxPolicy::direct(2, 2);
        for case in GradientCase::ALL {
            assert!(paml_loss_exact(&mdp, &mdp.transitions, &pol, &uniform(2), case).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn zero_discount_empirical_loss_vanishes() {
        let mdp = TabularMdp::two_state();
        let pol = SoftmaxPolicy::direct(2, 2);
        let probs = pol.probabilities();
        let mut r = rng(1);
        let real = sample_tabular_batch(&mdp.transitions, &mdp.rewards, &probs, &[0, 1], 5, Source::Real, &mut r);
        let model = sample_tabular_batch(&mdp.transitions, &mdp.rewards, &probs, &[0, 0, 1, 1], 5, Source::Model, &mut r);
        let q = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(empirical_paml_loss(&real, &model, &q, &pol, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn start_mismatch_and_empty_batches_rejected() {
        let mdp = TabularMdp::two_state();
        let pol = SoftmaxPolicy::direct(2, 2);
        let probs = pol.probabilities();
        let mut r = rng(2);
        let real = sample_tabular_batch(&mdp.transitions, &mdp.rewards, &probs, &[0, 1], 3, Source::Real, &mut r);
        let model = sample_tabular_batch(&mdp.transitions, &mdp.rewards, &probs, &[1, 0], 3, Source::Model, &mut r);
        let q = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(empirical_paml_loss(&real, &model, &q, &pol, 0.9), Err(Error::StartStateMismatch(0)));
        let empty = TabularBatch::new(vec![], 3, Source::Model).unwrap();
        assert_eq!(empirical_paml_loss(&real, &empty, &q, &pol, 0.9), Err(Error::EmptyBatch));
    }

    #[test]
    fn multinomial_conserves_counts() {
        let mut r = rng(9);
        for n in [0u64, 1, 7, 1000] {
            let c = multinomial(n, [0.2, 0.0, 0.5, 0.3].into_iter(), &mut r);
            assert_eq!(c.iter().sum::<u64>(), n);
            assert_eq!(c[1], 0);
        }
    }
}
