//! Linear-quadratic track: sampled REINFORCE gradients, observation
//! augmentation with irrelevant or redundant dimensions, and linear models
//! fitted either by multi-step prediction error or by matching per-episode
//! policy-gradient terms.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::{Episode, Source, Step, TrajectoryBatch};
use crate::seeding::{derive_seed, rng};
use crate::{Error, Result};

pub type LqrBatch = TrajectoryBatch<DVector<f64>, DVector<f64>>;
pub type LqrEpisode = Episode<DVector<f64>, DVector<f64>>;

/// Observations beyond this norm count as a diverged rollout.
pub const DIVERGENCE_NORM: f64 = 1e8;

fn standard_normal<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSign {
    /// `r = −(xᵀx + uᵀu)`: return maximization drives the state to zero.
    NegatedCost,
    /// `r = xᵀx + uᵀu` without the sign flip.
    Literal,
}

/// `x' = Ax + Bu` over a fixed number of actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: usize,
    pub reward: RewardSign,
}

impl LqrSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize, reward: RewardSign) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                what: "input matrix rows",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrices"));
        }
        Ok(Self { a, b, horizon, reward })
    }

    /// `A = [[0.9, 0.4], [−0.4, 0.9]]`, `B = I`, 200 actions.
    pub fn standard() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.4, -0.4, 0.9]),
            DMatrix::identity(2, 2),
            200,
            RewardSign::NegatedCost,
        )
        .expect("valid system")
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn next(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// Reward from the first `state_dim` coordinates of an observation.
    pub fn reward(&self, obs: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let cost = obs.rows(0, self.state_dim()).norm_squared() + u.norm_squared();
        match self.reward {
            RewardSign::NegatedCost => -cost,
            RewardSign::Literal => cost,
        }
    }

    fn sign(&self) -> f64 {
        match self.reward {
            RewardSign::NegatedCost => -1.0,
            RewardSign::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    None,
    Random,
    Correlated,
    LinearRedundant,
    NonlinearRedundant,
    NonlinearLinear,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 6] = [
        AugmentMode::None,
        AugmentMode::Random,
        AugmentMode::Correlated,
        AugmentMode::LinearRedundant,
        AugmentMode::NonlinearRedundant,
        AugmentMode::NonlinearLinear,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AugmentMode::None => "none",
            AugmentMode::Random => "random",
            AugmentMode::Correlated => "correlated",
            AugmentMode::LinearRedundant => "linear_redundant",
            AugmentMode::NonlinearRedundant => "nonlinear_redundant",
            AugmentMode::NonlinearLinear => "nonlinear_linear",
        }
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| Error::Unknown {
            kind: "noise mode",
            name: s.to_string(),
        })
    }
}

/// Maps a state to an observation. `W` is drawn once per experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmenter {
    pub mode: AugmentMode,
    pub noise_dims: usize,
    pub state_dim: usize,
    pub w: DMatrix<f64>,
}

/// Per-episode augmentation state: `η₀` for the correlated mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeNoise {
    pub eta0: DVector<f64>,
}

impl Augmenter {
    pub fn new<R: Rng>(mode: AugmentMode, noise_dims: usize, state_dim: usize, rng: &mut R) -> Self {
        let w = DMatrix::from_fn(state_dim, state_dim, |_, _| rng.random::<f64>());
        Self {
            mode,
            noise_dims,
            state_dim,
            w,
        }
    }

    pub fn obs_dim(&self) -> usize {
        let d = self.state_dim;
        match self.mode {
            AugmentMode::None => d,
            AugmentMode::Random | AugmentMode::Correlated => d + self.noise_dims,
            AugmentMode::LinearRedundant => 2 * d,
            AugmentMode::NonlinearRedundant => 3 * d,
            AugmentMode::NonlinearLinear => 4 * d,
        }
    }

    pub fn start_episode<R: Rng>(&self, rng: &mut R) -> EpisodeNoise {
        let n = if self.mode == AugmentMode::Correlated { self.noise_dims } else { 0 };
        EpisodeNoise {
            eta0: DVector::from_fn(n, |_, _| rng.random::<f64>()),
        }
    }

    /// Observation of `x` at time `t`.
    pub fn observe<R: Rng>(&self, x: &DVector<f64>, t: usize, episode: &EpisodeNoise, rng: &mut R) -> DVector<f64> {
        let extra: Vec<f64> = match self.mode {
            AugmentMode::None => Vec::new(),
            AugmentMode::Random => standard_normal(self.noise_dims, rng).iter().copied().collect(),
            AugmentMode::Correlated => episode.eta0.iter().map(|e| e.powi(t as i32)).collect(),
            AugmentMode::LinearRedundant => (self.w.transpose() * x).iter().copied().collect(),
            AugmentMode::NonlinearRedundant => x.iter().map(|v| v.cos()).chain(x.iter().map(|v| v.sin())).collect(),
            AugmentMode::NonlinearLinear => x
                .iter()
                .map(|v| v.cos())
                .chain(x.iter().map(|v| v.sin()))
                .chain((self.w.transpose() * x).iter().copied())
                .collect(),
        };
        DVector::from_iterator(x.len() + extra.len(), x.iter().copied().chain(extra))
    }
}

/// Optional ReLU layer added to the linear mean.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
}

/// `u ~ N(K o + W₂ relu(W₁ o + b₁), diag(σ²))` with a fixed log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianPolicy {
    pub k: DMatrix<f64>,
    pub log_std: DVector<f64>,
    pub hidden: Option<HiddenLayer>,
}

impl LinearGaussianPolicy {
    pub fn zeros(obs_dim: usize, action_dim: usize, log_std: f64) -> Self {
        Self {
            k: DMatrix::zeros(action_dim, obs_dim),
            log_std: DVector::from_element(action_dim, log_std),
            hidden: None,
        }
    }

    /// Adds a hidden layer with Gaussian first-layer weights of scale
    /// `1/√obs_dim` and a zero output layer, so the mean is unchanged.
    pub fn with_hidden<R: Rng>(mut self, width: usize, rng: &mut R) -> Self {
        if width == 0 {
            self.hidden = None;
            return self;
        }
        let (du, dobs) = self.k.shape();
        let scale = 1.0 / (dobs as f64).sqrt();
        self.hidden = Some(HiddenLayer {
            w1: DMatrix::from_fn(width, dobs, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
            b1: DVector::zeros(width),
            w2: DMatrix::zeros(du, width),
        });
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_std.map(f64::exp)
    }

    pub fn n_params(&self) -> usize {
        self.k.len() + self.hidden.as_ref().map_or(0, |h| h.w1.len() + h.b1.len() + h.w2.len())
    }

    /// `K` row-major, then `W₁` row-major, `b₁`, `W₂` row-major.
    pub fn params(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.k.transpose().iter().copied().collect();
        if let Some(h) = &self.hidden {
            v.extend(h.w1.transpose().iter());
            v.extend(h.b1.iter());
            v.extend(h.w2.transpose().iter());
        }
        DVector::from_vec(v)
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                what: "policy parameter",
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut it = p.iter().copied();
        let mut fill = |m: &mut DMatrix<f64>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] = it.next().expect("length checked");
                }
            }
        };
        fill(&mut self.k);
        if let Some(h) = &mut self.hidden {
            fill(&mut h.w1);
            let mut b = DMatrix::from_column_slice(h.b1.len(), 1, h.b1.as_slice());
            fill(&mut b);
            h.b1 = b.column(0).into_owned();
            fill(&mut h.w2);
        }
        Ok(())
    }

    pub fn mean(&self, obs: &DVector<f64>) -> DVector<f64> {
        let mut mu = &self.k * obs;
        if let Some(h) = &self.hidden {
            let a = (&h.w1 * obs + &h.b1).map(|v| v.max(0.0));
            mu += &h.w2 * a;
        }
        mu
    }

    /// `∂μ/∂o`.
    pub fn mean_jacobian(&self, obs: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = self.k.clone();
        if let Some(h) = &self.hidden {
            let a = &h.w1 * obs + &h.b1;
            let mut gated = h.w1.clone();
            for (i, v) in a.iter().enumerate() {
                if *v <= 0.0 {
                    gated.row_mut(i).fill(0.0);
                }
            }
            jac += &h.w2 * gated;
        }
        jac
    }

    pub fn sample<R: Rng>(&self, obs: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        self.mean(obs) + self.std().component_mul(&standard_normal(self.action_dim(), rng))
    }

    /// Standardized noise `(u − μ(o))/σ` that produced `u` at `o`.
    pub fn noise_of(&self, obs: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (u - self.mean(obs)).component_div(&self.std())
    }

    /// `∇_θ log π(u|o)` in the layout of [`params`](Self::params).
    pub fn score(&self, obs: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let var = self.std().map(|s| s * s);
        let delta = (u - self.mean(obs)).component_div(&var);
        let mut out: Vec<f64> = (&delta * obs.transpose()).transpose().iter().copied().collect();
        if let Some(h) = &self.hidden {
            let pre = &h.w1 * obs + &h.b1;
            let act = pre.map(|v| v.max(0.0));
            let mut g_hidden = h.w2.transpose() * &delta;
            for (i, v) in pre.iter().enumerate() {
                if *v <= 0.0 {
                    g_hidden[i] = 0.0;
                }
            }
            out.extend((&g_hidden * obs.transpose()).transpose().iter());
            out.extend(g_hidden.iter());
            out.extend((&delta * act.transpose()).transpose().iter());
        }
        DVector::from_vec(out)
    }
}

/// Deterministic model predicting the observation change,
/// `ΔÔ = M [o; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub m: DMatrix<f64>,
}

impl LinearModel {
    pub fn zeros(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(obs_dim, obs_dim + action_dim),
        }
    }

    /// `M = [−I, 0]`: predicts a zero next observation.
    pub fn zero_dynamics(obs_dim: usize, action_dim: usize) -> Self {
        let mut m = DMatrix::zeros(obs_dim, obs_dim + action_dim);
        m.view_mut((0, 0), (obs_dim, obs_dim)).fill_with_identity();
        m *= -1.0;
        Self { m }
    }

    /// `M = [A − I, B]`: exact for the unaugmented system.
    pub fn perfect(sys: &LqrSystem) -> Self {
        let n = sys.state_dim();
        let mut m = DMatrix::zeros(n, n + sys.action_dim());
        m.view_mut((0, 0), (n, n)).copy_from(&(&sys.a - DMatrix::identity(n, n)));
        m.view_mut((0, n), (n, sys.action_dim())).copy_from(&sys.b);
        Self { m }
    }

    pub fn obs_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.m.ncols() - self.m.nrows()
    }

    pub fn predict_delta(&self, obs: &DVector<f64>, action: &DVector<f64>) -> DVector<f64> {
        let z = DVector::from_iterator(obs.len() + action.len(), obs.iter().chain(action.iter()).copied());
        &self.m * z
    }

    pub fn next(&self, obs: &DVector<f64>, action: &DVector<f64>) -> DVector<f64> {
        obs + self.predict_delta(obs, action)
    }

    /// `[A B]` as implied by the first `d` rows and columns of `M` plus the identity.
    pub fn implied_ab(&self, d: usize, du: usize) -> DMatrix<f64> {
        let n = self.obs_dim();
        let mut ab = DMatrix::zeros(d, d + du);
        ab.view_mut((0, 0), (d, d)).copy_from(&(self.m.view((0, 0), (d, d)) + DMatrix::identity(d, d)));
        ab.view_mut((0, d), (d, du)).copy_from(&self.m.view((0, n), (d, du)));
        ab
    }
}

/// An episode together with whether it was cut short by divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub episode: LqrEpisode,
    pub truncated: bool,
}

impl Rollout {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_return(&self.episode, gamma)
    }
}

pub fn discounted_return(ep: &LqrEpisode, gamma: f64) -> f64 {
    ep.iter().rev().fold(0.0, |g, s| s.reward + gamma * g)
}

fn diverged(v: &DVector<f64>) -> bool {
    v.iter().any(|x| !x.is_finite()) || v.norm() > DIVERGENCE_NORM
}

/// Episode of the true system from state `x0`; observations are stored as states.
pub fn rollout_env<R: Rng>(
    sys: &LqrSystem,
    aug: &Augmenter,
    policy: &LinearGaussianPolicy,
    x0: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let noise = aug.start_episode(rng);
    let mut x = x0.clone();
    let mut obs = aug.observe(&x, 0, &noise, rng);
    let mut episode = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let u = policy.sample(&obs, rng);
        let reward = sys.reward(&obs, &u);
        x = sys.next(&x, &u);
        let next = aug.observe(&x, t + 1, &noise, rng);
        let bad = diverged(&next) || !reward.is_finite();
        episode.push(Step {
            state: obs,
            action: u,
            reward,
            next_state: next.clone(),
        });
        if bad {
            return Ok(Rollout { episode, truncated: true });
        }
        obs = next;
    }
    Ok(Rollout {
        episode,
        truncated: false,
    })
}

/// Model episode from observation `o0`. `noise(t)` supplies the standardized
/// policy noise at step `t`; pass sampled noise for planning or recovered
/// noise to replay a real episode's randomness.
pub fn rollout_model<F: FnMut(usize) -> DVector<f64>>(
    sys: &LqrSystem,
    model: &LinearModel,
    policy: &LinearGaussianPolicy,
    o0: &DVector<f64>,
    horizon: usize,
    mut noise: F,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let std = policy.std();
    let mut obs = o0.clone();
    let mut episode = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let u = policy.mean(&obs) + std.component_mul(&noise(t));
        let reward = sys.reward(&obs, &u);
        let next = model.next(&obs, &u);
        let bad = diverged(&next) || !reward.is_finite();
        episode.push(Step {
            state: obs,
            action: u,
            reward,
            next_state: next.clone(),
        });
        if bad {
            return Ok(Rollout { episode, truncated: true });
        }
        obs = next;
    }
    Ok(Rollout {
        episode,
        truncated: false,
    })
}

/// `(1/N) Σ_i Σ_t ∇log π(u_t|o_t) (G_i − b)` with `b` the batch-mean return
/// when `use_baseline` is set.
pub fn reinforce_gradient(batch: &LqrBatch, policy: &LinearGaussianPolicy, use_baseline: bool, gamma: f64) -> Result<DVector<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let returns: Vec<f64> = batch.episodes.iter().map(|e| discounted_return(e, gamma)).collect();
    let b = if use_baseline {
        returns.iter().sum::<f64>() / returns.len() as f64
    } else {
        0.0
    };
    let mut g = DVector::zeros(policy.n_params());
    for (ep, ret) in batch.episodes.iter().zip(&returns) {
        for s in ep {
            g.axpy(ret - b, &policy.score(&s.state, &s.action), 1.0);
        }
    }
    Ok(g / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PamlVariant {
    /// Mean over episodes of `‖s_i (G_i − Ĝ_i)‖²`.
    PerStart,
    /// `‖mean_i s_i (G_i − Ĝ_i)‖²`.
    AverageFirst,
}

/// Shared pieces of the gradient-matching loss for one real episode.
struct EpisodeTerm {
    score0: DVector<f64>,
    real_return: f64,
    model: Rollout,
}

fn episode_terms(
    sys: &LqrSystem,
    real: &LqrBatch,
    model: &LinearModel,
    policy: &LinearGaussianPolicy,
    gamma: f64,
) -> Result<Vec<EpisodeTerm>> {
    if real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    real.episodes
        .iter()
        .map(|ep| {
            let first = ep.first().ok_or(Error::EmptyBatch)?;
            if first.state.len() != model.obs_dim() {
                return Err(Error::DimensionMismatch {
                    what: "observation size",
                    expected: model.obs_dim(),
                    got: first.state.len(),
                });
            }
            let noise: Vec<DVector<f64>> = ep.iter().map(|s| policy.noise_of(&s.state, &s.action)).collect();
            let rollout = rollout_model(sys, model, policy, &first.state, ep.len(), |t| noise[t].clone())?;
            Ok(EpisodeTerm {
                score0: policy.score(&first.state, &first.action),
                real_return: discounted_return(ep, gamma),
                model: rollout,
            })
        })
        .collect()
}

/// Gradient-matching loss with the model used only for returns. Every real
/// episode contributes its first-step score times the true return against
/// the same score times the return of a model rollout from the same start
/// observation, driven by the episode's own policy noise.
pub fn paml_reinforce_loss(
    sys: &LqrSystem,
    real: &LqrBatch,
    model: &LinearModel,
    policy: &LinearGaussianPolicy,
    gamma: f64,
    variant: PamlVariant,
) -> Result<f64> {
    let terms = episode_terms(sys, real, model, policy, gamma)?;
    Ok(combine(&terms, gamma, variant).0)
}

/// Loss value and `dL/dĜ_i` for each episode.
fn combine(terms: &[EpisodeTerm], gamma: f64, variant: PamlVariant) -> (f64, Vec<f64>) {
    let n = terms.len() as f64;
    let gaps: Vec<f64> = terms.iter().map(|t| t.real_return - t.model.discounted_return(gamma)).collect();
    match variant {
        PamlVariant::PerStart => {
            let loss = terms.iter().zip(&gaps).map(|(t, g)| t.score0.norm_squared() * g * g).sum::<f64>() / n;
            let d = terms.iter().zip(&gaps).map(|(t, g)| -2.0 * t.score0.norm_squared() * g / n).collect();
            (loss, d)
        }
        PamlVariant::AverageFirst => {
            let mut mean = DVector::zeros(terms[0].score0.len());
            for (t, g) in terms.iter().zip(&gaps) {
                mean.axpy(*g / n, &t.score0, 1.0);
            }
            let d = terms.iter().map(|t| -2.0 * t.score0.dot(&mean) / n).collect();
            (mean.norm_squared(), d)
        }
    }
}

/// `∂Ĝ/∂M` of one model rollout by reverse accumulation through the
/// closed loop `ô_{t+1} = ô_t + M[ô_t; u_t]`, `u_t = μ(ô_t) + σε_t`.
fn return_gradient(sys: &LqrSystem, model: &LinearModel, policy: &LinearGaussianPolicy, rollout: &Rollout, gamma: f64) -> DMatrix<f64> {
    let n = model.obs_dim();
    let du = model.action_dim();
    let d = sys.state_dim();
    let sign = sys.sign();
    let m_o = model.m.columns(0, n);
    let m_u = model.m.columns(n, du);
    let identity = DMatrix::<f64>::identity(n, n);
    // Without a hidden layer the closed loop is the same at every step.
    let fixed_closed_t = policy.hidden.is_none().then(|| (&identity + m_o + m_u * &policy.k).transpose());
    let mut grad = DMatrix::zeros(n, n + du);
    let mut lambda = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let steps = &rollout.episode;
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        grad.columns_mut(0, n).ger(1.0, &lambda, &s.state, 1.0);
        grad.columns_mut(n, du).ger(1.0, &lambda, &s.action, 1.0);
        if t == 0 {
            break;
        }
        let w = 2.0 * sign * gamma.powi(t as i32);
        match &fixed_closed_t {
            Some(ct) => {
                next.gemv(1.0, ct, &lambda, 0.0);
                next.gemv_tr(w, &policy.k, &s.action, 1.0);
            }
            None => {
                let jac = policy.mean_jacobian(&s.state);
                let closed = &identity + m_o + m_u * &jac;
                next.gemv_tr(1.0, &closed, &lambda, 0.0);
                next.gemv_tr(w, &jac, &s.action, 1.0);
            }
        }
        for i in 0..d {
            next[i] += w * s.state[i];
        }
        std::mem::swap(&mut lambda, &mut next);
    }
    grad
}

/// Loss and `∂L/∂M` of [`paml_reinforce_loss`].
pub fn paml_reinforce_loss_grad(
    sys: &LqrSystem,
    real: &LqrBatch,
    model: &LinearModel,
    policy: &LinearGaussianPolicy,
    gamma: f64,
    variant: PamlVariant,
) -> Result<(f64, DMatrix<f64>)> {
    let terms = episode_terms(sys, real, model, policy, gamma)?;
    let (loss, d_returns) = combine(&terms, gamma, variant);
    let mut grad = DMatrix::zeros(model.m.nrows(), model.m.ncols());
    for (t, dg) in terms.iter().zip(d_returns) {
        if dg != 0.0 {
            grad += return_gradient(sys, model, policy, &t.model, gamma) * dg;
        }
    }
    Ok((loss, grad))
}

/// Loss and `∂L/∂M` of [`mle_multistep_loss`](crate::losses::mle_multistep_loss) by reverse accumulation
/// through each open-loop prediction.
pub fn mle_loss_grad(real: &LqrBatch, model: &LinearModel, horizon: usize) -> Result<(f64, DMatrix<f64>)> {
    if real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
    }
    let n = model.obs_dim();
    let du = model.action_dim();
    let m_o = model.m.columns(0, n);
    let m_u = model.m.columns(n, du);
    let a_t = (DMatrix::<f64>::identity(n, n) + m_o).transpose();
    let mut grad = DMatrix::zeros(n, n + du);
    let mut preds = DMatrix::zeros(n, horizon);
    let mut errs = DMatrix::zeros(n, horizon);
    let (mut pred, mut delta, mut lambda, mut next, mut outer) =
        (DVector::zeros(n), DVector::zeros(n), DVector::zeros(n), DVector::zeros(n), DVector::zeros(n));
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
            let window = &ep[t..t + horizon];
            pred.copy_from(&ep[t].state);
            for (h, step) in window.iter().enumerate() {
                preds.set_column(h, &pred);
                delta.gemv(1.0, &m_o, &pred, 0.0);
                delta.gemv(1.0, &m_u, &step.action, 1.0);
                let mut e = errs.column_mut(h);
                e.copy_from(&delta);
                e -= &step.next_state;
                e += &step.state;
                total += e.norm_squared();
                pred += &delta;
            }
            lambda.fill(0.0);
            for h in (0..horizon).rev() {
                outer.copy_from(&lambda);
                outer.axpy(2.0, &errs.column(h), 1.0);
                grad.columns_mut(0, n).ger(1.0, &outer, &preds.column(h), 1.0);
                grad.columns_mut(n, du).ger(1.0, &outer, &window[h].action, 1.0);
                next.gemv(1.0, &a_t, &lambda, 0.0);
                next.gemv_tr(2.0, &m_o, &errs.column(h), 1.0);
                std::mem::swap(&mut lambda, &mut next);
            }
            terms += 1;
        }
    }
    Ok((total / terms as f64, grad / terms as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqrObjective {
    Paml,
    Mle,
    /// REINFORCE directly on real episodes; no model.
    ModelFree,
}

impl LqrObjective {
    pub fn tag(self) -> &'static str {
        match self {
            LqrObjective::Paml => "paml",
            LqrObjective::Mle => "mle",
            LqrObjective::ModelFree => "model_free",
        }
    }

    /// Initial model learning rate used when none is configured.
    pub fn default_model_lr(self) -> f64 {
        match self {
            LqrObjective::Paml => 1e-4,
            LqrObjective::Mle | LqrObjective::ModelFree => 1e-5,
        }
    }
}

impl FromStr for LqrObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [LqrObjective::Paml, LqrObjective::Mle, LqrObjective::ModelFree]
            .into_iter()
            .find(|o| o.tag() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "objective",
                name: s.to_string(),
            })
    }
}

/// Plain SGD on `M` with a step schedule that divides the learning rate by
/// ten at each milestone of the cumulative step count, and a cap on the
/// length of each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFitConfig {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub steps: usize,
    /// Prediction horizon for the multi-step loss; `None` uses the episode length.
    pub horizon: Option<usize>,
    pub variant: PamlVariant,
    /// Largest Frobenius norm of a single update; longer steps are rescaled.
    pub max_step: f64,
}

impl ModelFitConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// Outcome of a model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: LinearModel,
    pub loss: f64,
    pub steps_taken: usize,
    /// The fit stalled: no shrunken step lowered the loss, or the start was non-finite.
    pub diverged: bool,
}

/// Real episodes together with the policy that collected them.
#[derive(Debug, Clone)]
pub struct ReplayBatch {
    pub batch: LqrBatch,
    pub policy: LinearGaussianPolicy,
}

/// Loss and gradient over a replay buffer, each batch weighted by its
/// episode count. Gradient-matching terms re-simulate every batch under the
/// policy that collected it, so the true dynamics stay a zero of the loss.
pub fn replay_loss_grad(
    sys: &LqrSystem,
    replay: &[ReplayBatch],
    model: &LinearModel,
    objective: LqrObjective,
    config: &ModelFitConfig,
    gamma: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let total: usize = replay.iter().map(|r| r.batch.len()).sum();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(model.m.nrows(), model.m.ncols());
    for r in replay.iter().filter(|r| !r.batch.is_empty()) {
        let (l, g) = match objective {
            LqrObjective::Paml => paml_reinforce_loss_grad(sys, &r.batch, model, &r.policy, gamma, config.variant)?,
            LqrObjective::Mle => {
                let h = config.horizon.unwrap_or_else(|| r.batch.episodes.iter().map(|e| e.len()).min().unwrap_or(1));
                mle_loss_grad(&r.batch, model, h)?
            }
            LqrObjective::ModelFree => return Err(Error::InvalidArgument("model-free runs fit no model".into())),
        };
        let w = r.batch.len() as f64 / total as f64;
        loss += w * l;
        grad += g * w;
    }
    Ok((loss, grad))
}

/// Fits `model` on a replay buffer by SGD, starting the schedule at `step_offset`.
pub fn fit_lqr_model(
    sys: &LqrSystem,
    replay: &[ReplayBatch],
    model: &LinearModel,
    objective: LqrObjective,
    config: &ModelFitConfig,
    gamma: f64,
    step_offset: usize,
) -> Result<FitReport> {
    let eval = |m: &LinearModel| replay_loss_grad(sys, replay, m, objective, config, gamma);
    let mut current = model.clone();
    let (mut loss, mut grad) = eval(&current)?;
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Ok(FitReport {
            model: current,
            loss,
            steps_taken: 0,
            diverged: true,
        });
    }
    // Steps that raise the loss are rejected and the step shrinks; accepted
    // steps let it grow back towards the scheduled learning rate.
    let mut scale = 1.0;
    let mut taken = 0;
    for s in 0..config.steps {
        let mut step = &grad * (config.lr_at(step_offset + s) * scale);
        let norm = step.norm();
        if norm > config.max_step {
            step *= config.max_step / norm;
        }
        let next = LinearModel { m: &current.m - step };
        let (l, g) = eval(&next)?;
        taken += 1;
        if l.is_finite() && l <= loss && g.iter().all(|v| v.is_finite()) {
            current = next;
            loss = l;
            grad = g;
            scale = (scale * 2.0).min(1.0);
        } else {
            scale *= 0.5;
            if scale < 1e-12 {
                return Ok(FitReport {
                    model: current,
                    loss,
                    steps_taken: taken,
                    diverged: true,
                });
            }
        }
    }
    Ok(FitReport {
        model: current,
        loss,
        steps_taken: taken,
        diverged: false,
    })
}

/// Finite-horizon Riccati recursion with `Q = R = I` and terminal cost zero.
/// Returns the optimal expected return from `x₀ ~ N(0, Σ₀)` and the
/// time-varying optimal gains `u_t = K_t x_t`.
pub fn riccati_optimum(sys: &LqrSystem, sigma0: &DMatrix<f64>, gamma: f64) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let (n, m) = (sys.state_dim(), sys.action_dim());
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut gains = Vec::with_capacity(sys.horizon);
    for _ in 0..sys.horizon {
        let s = DMatrix::identity(m, m) + sys.b.transpose() * &p * &sys.b * gamma;
        let k = -s
            .lu()
            .solve(&(sys.b.transpose() * &p * &sys.a * gamma))
            .ok_or(Error::Singular("Riccati step"))?;
        let a_cl = &sys.a + &sys.b * &k;
        p = DMatrix::identity(n, n) + k.transpose() * &k + a_cl.transpose() * &p * &a_cl * gamma;
        gains.push(k);
    }
    gains.reverse();
    Ok((sys.sign() * (&p * sigma0).trace(), gains))
}

/// Expected return of the time-varying deterministic feedback `u_t = K_t x_t`
/// from `x₀ ~ N(0, Σ₀)`, plus i.i.d. action noise `K_η η_t` with
/// `η_t ~ N(0, I)` when `k_eta` is given.
pub fn linear_feedback_return(
    sys: &LqrSystem,
    gains: &[DMatrix<f64>],
    k_eta: Option<&DMatrix<f64>>,
    sigma0: &DMatrix<f64>,
    gamma: f64,
) -> f64 {
    let n = sys.state_dim();
    let mut sigma = sigma0.clone();
    let mut total = 0.0;
    let mut disc = 1.0;
    let (noise_cov, noise_cost) = match k_eta {
        Some(ke) => (&sys.b * ke * ke.transpose() * sys.b.transpose(), (ke.transpose() * ke).trace()),
        None => (DMatrix::zeros(n, n), 0.0),
    };
    for t in 0..sys.horizon {
        let k = &gains[t.min(gains.len() - 1)];
        let cost = (&sigma * (DMatrix::identity(n, n) + k.transpose() * k)).trace() + noise_cost;
        total += disc * cost;
        let a_cl = &sys.a + &sys.b * k;
        sigma = &a_cl * sigma * a_cl.transpose() + &noise_cov;
        disc *= gamma;
    }
    sys.sign() * total
}

/// Exact expected return of the policy mean from `x₀ ~ N(0, I)` when the mean
/// is linear in the state: modes none, random and linear_redundant without a
/// hidden layer. `None` otherwise.
pub fn exact_mean_return(sys: &LqrSystem, aug: &Augmenter, policy: &LinearGaussianPolicy, gamma: f64) -> Option<f64> {
    if policy.hidden.is_some() {
        return None;
    }
    let d = sys.state_dim();
    let kx = policy.k.columns(0, d).into_owned();
    let sigma0 = DMatrix::identity(d, d);
    match aug.mode {
        AugmentMode::None => Some(linear_feedback_return(sys, &[kx], None, &sigma0, gamma)),
        AugmentMode::LinearRedundant => {
            let k = kx + policy.k.columns(d, d) * aug.w.transpose();
            Some(linear_feedback_return(sys, &[k], None, &sigma0, gamma))
        }
        AugmentMode::Random => {
            let ke = policy.k.columns(d, aug.noise_dims).into_owned();
            Some(linear_feedback_return(sys, &[kx], Some(&ke), &sigma0, gamma))
        }
        _ => None,
    }
}

/// Monte-Carlo return of the policy mean over the given start states.
pub fn mc_mean_return<R: Rng>(sys: &LqrSystem, aug: &Augmenter, policy: &LinearGaussianPolicy, starts: &[DVector<f64>], gamma: f64, rng: &mut R) -> f64 {
    let mut total = 0.0;
    for x0 in starts {
        let noise = aug.start_episode(rng);
        let mut x = x0.clone();
        let mut disc = 1.0;
        for t in 0..sys.horizon {
            let obs = aug.observe(&x, t, &noise, rng);
            let u = policy.mean(&obs);
            total += disc * sys.reward(&obs, &u);
            x = sys.next(&x, &u);
            disc *= gamma;
        }
    }
    total / starts.len() as f64
}

/// Adam on a parameter vector, ascent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    /// Step along `+grad`.
    pub fn ascend(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = &self.m * B1 + grad * (1.0 - B1);
        self.v = &self.v * B2 + grad.component_mul(grad) * (1.0 - B2);
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..params.len() {
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Starting point of the model before the first fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// `M = 0`: the observation stays put.
    Identity,
    /// `M = [−I, 0]`: the observation jumps to zero.
    ZeroDynamics,
}

/// Configuration of one model-based REINFORCE run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig {
    pub noise_mode: AugmentMode,
    pub noise_dims: usize,
    pub objective: LqrObjective,
    pub seed: u64,
    /// Scales the total environment steps and the virtual episodes per iteration.
    pub desk_scale: f64,
    pub total_env_steps: usize,
    pub real_transitions_per_iter: usize,
    /// `None` picks 2000, or 500 for the gradient-matching objective without extra dimensions.
    pub virtual_episodes: Option<usize>,
    pub horizon: usize,
    pub gamma: f64,
    pub reward: RewardSign,
    /// `None` picks the objective's default.
    pub model_lr: Option<f64>,
    pub lr_milestones: Vec<usize>,
    pub model_steps_per_iter: usize,
    pub mle_horizon: Option<usize>,
    pub paml_variant: PamlVariant,
    pub model_max_step: f64,
    pub model_init: ModelInit,
    /// Number of most recent iterations whose real data the model is fit on; 0 keeps all.
    pub replay_iters: usize,
    /// Scale of the Gaussian perturbation added to the initial model.
    pub model_init_scale: f64,
    pub policy_lr: f64,
    pub policy_batch: usize,
    pub log_std: f64,
    pub hidden: usize,
    pub eval_starts: usize,
}

impl Default for LqrConfig {
    fn default() -> Self {
        Self {
            noise_mode: AugmentMode::None,
            noise_dims: 0,
            objective: LqrObjective::Paml,
            seed: 0,
            desk_scale: 0.1,
            total_env_steps: 200_000,
            real_transitions_per_iter: 1000,
            virtual_episodes: None,
            horizon: 200,
            gamma: 1.0,
            reward: RewardSign::NegatedCost,
            model_lr: None,
            lr_milestones: vec![500, 1200, 1800],
            model_steps_per_iter: 200,
            mle_horizon: None,
            paml_variant: PamlVariant::PerStart,
            model_max_step: 0.05,
            model_init: ModelInit::Identity,
            replay_iters: 4,
            model_init_scale: 0.01,
            policy_lr: 0.02,
            policy_batch: 20,
            log_std: (0.3f64).ln(),
            hidden: 0,
            eval_starts: 100,
        }
    }
}

impl LqrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.desk_scale > 0.0) {
            return Err(Error::InvalidArgument("desk scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidDiscount(self.gamma));
        }
        if self.horizon == 0 || self.policy_batch == 0 || self.eval_starts == 0 || self.real_transitions_per_iter < self.horizon {
            return Err(Error::InvalidArgument(
                "horizon, batch sizes and evaluation starts must be positive, with at least one episode per iteration".into(),
            ));
        }
        if self.noise_dims > 0 && !matches!(self.noise_mode, AugmentMode::Random | AugmentMode::Correlated) {
            return Err(Error::InvalidArgument(format!("noise dims are ignored in mode {}", self.noise_mode)));
        }
        Ok(())
    }

    pub fn virtual_episodes_full(&self) -> usize {
        self.virtual_episodes.unwrap_or(
            if self.objective == LqrObjective::Paml && (self.noise_mode == AugmentMode::None || self.noise_dims == 0) {
                500
            } else {
                2000
            },
        )
    }

    pub fn episodes_per_iter(&self) -> usize {
        self.real_transitions_per_iter / self.horizon
    }

    pub fn iterations(&self) -> usize {
        let steps = (self.total_env_steps as f64 * self.desk_scale).round() as usize;
        (steps / (self.episodes_per_iter() * self.horizon)).max(1)
    }

    pub fn virtual_episodes_per_iter(&self) -> usize {
        ((self.virtual_episodes_full() as f64 * self.desk_scale).round() as usize).max(self.policy_batch)
    }

    pub fn model_fit(&self) -> ModelFitConfig {
        ModelFitConfig {
            lr: self.model_lr.unwrap_or(self.objective.default_model_lr()),
            milestones: self.lr_milestones.clone(),
            steps: self.model_steps_per_iter,
            horizon: self.mle_horizon,
            variant: self.paml_variant,
            max_step: self.model_max_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqrIterRow {
    pub iter: usize,
    pub env_steps: usize,
    #[serde(rename = "J_mc")]
    pub j_mc: f64,
    pub model_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrRecord {
    pub rows: Vec<LqrIterRow>,
    pub policy: LinearGaussianPolicy,
    pub model: Option<LinearModel>,
    pub augmenter: Augmenter,
    /// Exact return of the final policy mean where available.
    pub final_exact: Option<f64>,
    pub diverged_fits: usize,
    pub truncated_rollouts: usize,
}

impl LqrRecord {
    pub const CSV_HEADER: &'static str = "iter,env_steps,J_mc,model_loss";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.env_steps, r.j_mc, r.model_loss));
        }
        out
    }

    pub fn final_j(&self) -> f64 {
        self.final_exact.unwrap_or_else(|| self.rows.last().map_or(f64::NAN, |r| r.j_mc))
    }
}

/// Model-based REINFORCE: each iteration collects real episodes, refits the
/// warm-started model on them and takes Adam steps on REINFORCE gradients
/// from model rollouts that start at real start observations.
pub fn mbrl_lqr(sys: &LqrSystem, config: &LqrConfig) -> Result<LqrRecord> {
    config.validate()?;
    let sys = LqrSystem {
        horizon: config.horizon,
        reward: config.reward,
        ..sys.clone()
    };
    let (d, du) = (sys.state_dim(), sys.action_dim());
    let mut setup_rng = rng(derive_seed(config.seed, 0));
    let aug = Augmenter::new(config.noise_mode, config.noise_dims, d, &mut setup_rng);
    let mut policy = LinearGaussianPolicy::zeros(aug.obs_dim(), du, config.log_std).with_hidden(config.hidden, &mut setup_rng);
    let eval_starts: Vec<DVector<f64>> = (0..config.eval_starts).map(|_| standard_normal(d, &mut setup_rng)).collect();
    let eval_seed = derive_seed(config.seed, 1);
    let mut model = match config.model_init {
        ModelInit::Identity => LinearModel::zeros(aug.obs_dim(), du),
        ModelInit::ZeroDynamics => LinearModel::zero_dynamics(aug.obs_dim(), du),
    };
    model.m += DMatrix::from_fn(model.m.nrows(), model.m.ncols(), |_, _| {
        config.model_init_scale * setup_rng.sample::<f64, _>(StandardNormal)
    });
    let fit = config.model_fit();
    let mut adam = Adam::new(policy.n_params(), config.policy_lr);
    let mut params = policy.params();
    let mut start_pool: Vec<DVector<f64>> = Vec::new();
    let mut replay: VecDeque<ReplayBatch> = VecDeque::new();
    let mut rows = Vec::new();
    let (mut model_steps, mut diverged_fits, mut truncated) = (0usize, 0usize, 0usize);
    for iter in 0..config.iterations() {
        let mut iter_rng = rng(derive_seed(config.seed, 2 + iter as u64));
        let mut episodes = Vec::with_capacity(config.episodes_per_iter());
        for _ in 0..config.episodes_per_iter() {
            let x0 = standard_normal(d, &mut iter_rng);
            let r = rollout_env(&sys, &aug, &policy, &x0, config.horizon, &mut iter_rng)?;
            truncated += r.truncated as usize;
            start_pool.push(r.episode[0].state.clone());
            episodes.push(r.episode);
        }
        let real = TrajectoryBatch::new(episodes, config.horizon, Source::Real)?;
        let mut model_loss = f64::NAN;
        if config.objective == LqrObjective::ModelFree {
            let g = reinforce_gradient(&real, &policy, true, config.gamma)?;
            adam.ascend(&mut params, &g);
            policy.set_params(&params)?;
        } else {
            replay.push_back(ReplayBatch {
                batch: real,
                policy: policy.clone(),
            });
            if config.replay_iters > 0 && replay.len() > config.replay_iters {
                replay.pop_front();
            }
            let rep = fit_lqr_model(&sys, replay.make_contiguous(), &model, config.objective, &fit, config.gamma, model_steps)?;
            model_steps += rep.steps_taken;
            diverged_fits += rep.diverged as usize;
            model_loss = rep.loss;
            model = rep.model;
            let mut remaining = config.virtual_episodes_per_iter();
            while remaining > 0 {
                let size = remaining.min(config.policy_batch);
                remaining -= size;
                let mut virt = Vec::with_capacity(size);
                for _ in 0..size {
                    let o0 = start_pool.choose(&mut iter_rng).expect("non-empty pool").clone();
                    let r = rollout_model(&sys, &model, &policy, &o0, config.horizon, |_| standard_normal(du, &mut iter_rng))?;
                    truncated += r.truncated as usize;
                    virt.push(r.episode);
                }
                let batch = TrajectoryBatch::new(virt, config.horizon, Source::Model)?;
                let g = reinforce_gradient(&batch, &policy, true, config.gamma)?;
                if g.iter().all(|v| v.is_finite()) {
                    adam.ascend(&mut params, &g);
                    policy.set_params(&params)?;
                }
            }
        }
        let j_mc = mc_mean_return(&sys, &aug, &policy, &eval_starts, config.gamma, &mut rng(eval_seed));
        rows.push(LqrIterRow {
            iter,
            env_steps: (iter + 1) * config.episodes_per_iter() * config.horizon,
            j_mc,
            model_loss,
        });
    }
    Ok(LqrRecord {
        rows,
        final_exact: exact_mean_return(&sys, &aug, &policy, config.gamma),
        policy,
        model: (config.objective != LqrObjective::ModelFree).then_some(model),
        augmenter: aug,
        diverged_fits,
        truncated_rollouts: truncated,
    })
}
