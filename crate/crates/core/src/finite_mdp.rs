//! Exact tabular MDP machinery.
//!
//! Transition tensors are stored per action as dense `n_states × n_states`
//! matrices with rows indexed by the current state and columns by the next
//! state, i.e. `P[a][x][x']`. External files may use the flattened layout in
//! which row `i·|A| + j` holds `P(·|x_i, a_j)`; the loader converts on ingest.
//!
//! Policies are represented by their probability tables (`n_states ×
//! n_actions`), so every operation here works for any policy class.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// Tolerance on transition row sums when a kernel is ingested.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance on start distributions and other probability vectors.
pub const DISTRIBUTION_TOL: f64 = 1e-10;

/// A transition kernel `P(x'|x,a)` stored as one row-stochastic matrix per action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    n_states: usize,
    per_action: Vec<DMatrix<f64>>,
}

impl Transitions {
    /// Builds a kernel and validates every row.
    pub fn new(per_action: Vec<DMatrix<f64>>) -> Result<Self> {
        let t = Self::new_unchecked(per_action)?;
        t.validate()?;
        Ok(t)
    }

    /// Builds a kernel checking shapes only. Used for softmax-derived models,
    /// whose rows are stochastic up to rounding.
    pub fn new_unchecked(per_action: Vec<DMatrix<f64>>) -> Result<Self> {
        if per_action.is_empty() {
            return Err(Error::InvalidArgument("kernel needs at least one action".into()));
        }
        let n_states = per_action[0].nrows();
        if n_states == 0 {
            return Err(Error::InvalidArgument("kernel needs at least one state".into()));
        }
        for m in &per_action {
            if m.nrows() != n_states || m.ncols() != n_states {
                return Err(Error::DimensionMismatch {
                    what: "transition matrix side",
                    expected: n_states,
                    got: if m.nrows() != n_states { m.nrows() } else { m.ncols() },
                });
            }
        }
        Ok(Self { n_states, per_action })
    }

    /// Every action keeps the state fixed.
    pub fn identity(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            per_action: vec![DMatrix::identity(n_states, n_states); n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.per_action.len()
    }

    pub fn action(&self, a: usize) -> &DMatrix<f64> {
        &self.per_action[a]
    }

    pub fn prob(&self, a: usize, x: usize, next: usize) -> f64 {
        self.per_action[a][(x, next)]
    }

    /// Row `P(·|x,a)` as a vector.
    pub fn row(&self, x: usize, a: usize) -> DVector<f64> {
        self.per_action[a].row(x).transpose()
    }

    /// Checks non-negativity and unit row sums within [`ROW_SUM_TOL`].
    /// The worst offending row is reported.
    pub fn validate(&self) -> Result<()> {
        let mut worst: Option<(usize, usize, f64)> = None;
        for (a, m) in self.per_action.iter().enumerate() {
            for x in 0..self.n_states {
                let mut sum = 0.0;
                for y in 0..self.n_states {
                    let p = m[(x, y)];
                    if !p.is_finite() {
                        return Err(Error::NonFinite("transition kernel"));
                    }
                    if p < 0.0 {
                        return Err(Error::NegativeProbability {
                            action: a,
                            state: x,
                            next: y,
                            value: p,
                        });
                    }
                    sum += p;
                }
                let dev = (sum - 1.0).abs();
                if dev > ROW_SUM_TOL && worst.is_none_or(|(_, _, s)| dev > (s - 1.0).abs()) {
                    worst = Some((a, x, sum));
                }
            }
        }
        match worst {
            Some((action, state, sum)) => Err(Error::RowSum {
                action,
                state,
                sum,
                deviation: (sum - 1.0).abs(),
            }),
            None => Ok(()),
        }
    }

    fn check_policy(&self, policy: &DMatrix<f64>) -> Result<()> {
        if policy.nrows() != self.n_states {
            return Err(Error::DimensionMismatch {
                what: "policy table rows (states)",
                expected: self.n_states,
                got: policy.nrows(),
            });
        }
        if policy.ncols() != self.n_actions() {
            return Err(Error::DimensionMismatch {
                what: "policy table columns (actions)",
                expected: self.n_actions(),
                got: policy.ncols(),
            });
        }
        Ok(())
    }
}

/// The true environment: kernel, reward table `r[x][a]` and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub transitions: Transitions,
    pub rewards: DMatrix<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(transitions: Transitions, rewards: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let mdp = Self {
            transitions,
            rewards,
            gamma,
        };
        validate_mdp(&mdp)?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.transitions.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.n_actions()
    }

    pub fn r_max(&self) -> f64 {
        self.rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// `Rmax / (1 − γ)`.
    pub fn q_max(&self) -> f64 {
        self.r_max() / (1.0 - self.gamma)
    }

    /// Parses the JSON definition format (see [`MdpFile`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_mdp()
    }

    /// Serializes using the flattened external layout.
    pub fn to_json(&self) -> String {
        let (nx, na) = (self.n_states(), self.n_actions());
        let mut p = Vec::with_capacity(nx * na);
        let mut r = Vec::with_capacity(nx * na);
        for x in 0..nx {
            for a in 0..na {
                p.push(self.transitions.row(x, a).iter().copied().collect::<Vec<_>>());
                r.push(self.rewards[(x, a)]);
            }
        }
        let value = serde_json::json!({
            "n_states": nx,
            "n_actions": na,
            "gamma": self.gamma,
            "P": p,
            "r": r,
        });
        serde_json::to_string_pretty(&value).expect("serializing plain numbers")
    }

    /// The bundled two-state instance.
    pub fn two_state() -> Self {
        Self::from_json(include_str!("../../../fixtures/2state.json")).expect("bundled fixture")
    }

    /// The bundled three-state instance.
    pub fn three_state() -> Self {
        Self::from_json(include_str!("../../../fixtures/3state.json")).expect("bundled fixture")
    }
}

/// On-disk MDP definition.
///
/// `P` is either the flattened 2-D layout (`|X|·|A|` rows, row `i·|A| + j`
/// holding `P(·|x_i, a_j)`) or a 3-D array indexed `[action][state][next]`.
/// `r` is either flat (`r[i·|A| + j]`) or a `[state][action]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    #[serde(rename = "P")]
    pub p: Value,
    pub r: Value,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<TabularMdp> {
        let (nx, na) = (self.n_states, self.n_actions);
        if nx == 0 || na == 0 {
            return Err(Error::Parse("n_states and n_actions must be positive".into()));
        }
        let p = parse_transitions(&self.p, nx, na)?;
        let r = parse_rewards(&self.r, nx, na)?;
        TabularMdp::new(p, r, self.gamma)
    }
}

fn as_f64_vec(v: &Value, key: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("`{key}` must be an array")))?;
    arr.iter()
        .map(|e| {
            e.as_f64()
                .ok_or_else(|| Error::Parse(format!("`{key}` has a non-numeric entry")))
        })
        .collect()
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map_or(0, depth),
        _ => 0,
    }
}

fn parse_transitions(v: &Value, nx: usize, na: usize) -> Result<Transitions> {
    let mut per_action = vec![DMatrix::zeros(nx, nx); na];
    match depth(v) {
        2 => {
            let rows = v.as_array().unwrap();
            if rows.len() != nx * na {
                return Err(Error::Parse(format!(
                    "`P` has {} rows, expected n_states·n_actions = {}",
                    rows.len(),
                    nx * na
                )));
            }
            for (idx, row) in rows.iter().enumerate() {
                let (x, a) = (idx / na, idx % na);
                let vals = as_f64_vec(row, "P")?;
                if vals.len() != nx {
                    return Err(Error::Parse(format!("`P` row {idx} has {} entries", vals.len())));
                }
                for (y, p) in vals.into_iter().enumerate() {
                    per_action[a][(x, y)] = p;
                }
            }
        }
        3 => {
            let acts = v.as_array().unwrap();
            if acts.len() != na {
                return Err(Error::Parse(format!("`P` has {} action blocks", acts.len())));
            }
            for (a, block) in acts.iter().enumerate() {
                let rows = block.as_array().unwrap();
                if rows.len() != nx {
                    return Err(Error::Parse(format!("`P[{a}]` has {} rows", rows.len())));
                }
                for (x, row) in rows.iter().enumerate() {
                    let vals = as_f64_vec(row, "P")?;
                    if vals.len() != nx {
                        return Err(Error::Parse(format!("`P[{a}][{x}]` has {} entries", vals.len())));
                    }
                    for (y, p) in vals.into_iter().enumerate() {
                        per_action[a][(x, y)] = p;
                    }
                }
            }
        }
        d => return Err(Error::Parse(format!("`P` must be a 2-D or 3-D array, got depth {d}"))),
    }
    Transitions::new(per_action)
}

fn parse_rewards(v: &Value, nx: usize, na: usize) -> Result<DMatrix<f64>> {
    let mut r = DMatrix::zeros(nx, na);
    match depth(v) {
        1 => {
            let vals = as_f64_vec(v, "r")?;
            if vals.len() != nx * na {
                return Err(Error::Parse(format!("`r` has {} entries, expected {}", vals.len(), nx * na)));
            }
            for (idx, val) in vals.into_iter().enumerate() {
                r[(idx / na, idx % na)] = val;
            }
        }
        2 => {
            let rows = v.as_array().unwrap();
            if rows.len() != nx {
                return Err(Error::Parse(format!("`r` has {} rows, expected {nx}", rows.len())));
            }
            for (x, row) in rows.iter().enumerate() {
                let vals = as_f64_vec(row, "r")?;
                if vals.len() != na {
                    return Err(Error::Parse(format!("`r[{x}]` has {} entries, expected {na}", vals.len())));
                }
                for (a, val) in vals.into_iter().enumerate() {
                    r[(x, a)] = val;
                }
            }
        }
        d => return Err(Error::Parse(format!("`r` must be a 1-D or 2-D array, got depth {d}"))),
    }
    Ok(r)
}

/// Succeeds iff the kernel is valid, rewards are finite and `0 ≤ γ < 1`.
pub fn validate_mdp(mdp: &TabularMdp) -> Result<()> {
    mdp.transitions.validate()?;
    if !(0.0..1.0).contains(&mdp.gamma) {
        return Err(Error::InvalidDiscount(mdp.gamma));
    }
    if mdp.rewards.nrows() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            what: "reward rows (states)",
            expected: mdp.n_states(),
            got: mdp.rewards.nrows(),
        });
    }
    if mdp.rewards.ncols() != mdp.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "reward columns (actions)",
            expected: mdp.n_actions(),
            got: mdp.rewards.ncols(),
        });
    }
    if mdp.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    Ok(())
}

/// A policy whose action probabilities are differentiable in a parameter vector.
pub trait DifferentiablePolicy {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;
    /// Probability table `π(a|x)` with rows indexed by state.
    fn probabilities(&self) -> DMatrix<f64>;
    /// `∇_θ π(a|x)`.
    fn prob_gradient(&self, x: usize, a: usize) -> DVector<f64>;
}

/// Exponential-family policy `π_θ(a|x) ∝ exp(φ(a|x)ᵀθ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    theta: DVector<f64>,
    /// `features[x]` is `n_actions × d`; row `a` is `φ(a|x)`.
    features: Vec<DMatrix<f64>>,
}

impl SoftmaxPolicy {
    pub fn new(features: Vec<DMatrix<f64>>, theta: DVector<f64>) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidArgument("policy needs at least one state".into()))?;
        let (na, d) = (first.nrows(), first.ncols());
        if na == 0 {
            return Err(Error::InvalidArgument("policy needs at least one action".into()));
        }
        for f in &features {
            if f.nrows() != na {
                return Err(Error::DimensionMismatch {
                    what: "feature rows (actions)",
                    expected: na,
                    got: f.nrows(),
                });
            }
            if f.ncols() != d {
                return Err(Error::DimensionMismatch {
                    what: "feature dimension",
                    expected: d,
                    got: f.ncols(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("policy features"));
            }
        }
        if theta.len() != d {
            return Err(Error::DimensionMismatch {
                what: "policy parameter",
                expected: d,
                got: theta.len(),
            });
        }
        Ok(Self { theta, features })
    }

    /// One-hot features with `d = n_states · n_actions`, index `x·|A| + a`; θ = 0.
    pub fn direct(n_states: usize, n_actions: usize) -> Self {
        let d = n_states * n_actions;
        let features = (0..n_states)
            .map(|x| {
                let mut f = DMatrix::zeros(n_actions, d);
                for a in 0..n_actions {
                    f[(a, x * n_actions + a)] = 1.0;
                }
                f
            })
            .collect();
        Self {
            theta: DVector::zeros(d),
            features,
        }
    }

    /// Same features, new parameter.
    pub fn with_theta(&self, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "policy parameter",
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(Self {
            theta,
            features: self.features.clone(),
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn features(&self, x: usize) -> &DMatrix<f64> {
        &self.features[x]
    }

    pub fn feature(&self, x: usize, a: usize) -> DVector<f64> {
        self.features[x].row(a).transpose()
    }

    /// `π_θ(·|x)`, computed with a max-shift for stability.
    pub fn action_probs(&self, x: usize) -> DVector<f64> {
        let logits = &self.features[x] * &self.theta;
        let m = logits.max();
        let e = logits.map(|l| (l - m).exp());
        let s = e.sum();
        e / s
    }

    /// `φ̄(x) = Σ_a π(a|x) φ(a|x)`.
    pub fn mean_feature(&self, x: usize) -> DVector<f64> {
        self.features[x].tr_mul(&self.action_probs(x))
    }

    /// Score `∇_θ log π(a|x) = φ(a|x) − φ̄(x)`.
    pub fn score(&self, x: usize, a: usize) -> DVector<f64> {
        self.feature(x, a) - self.mean_feature(x)
    }

    /// `∇²_θ π(a|x) = π(a|x)[(φ_a − φ̄)(φ_a − φ̄)ᵀ − Cov_π(φ)]`.
    pub fn prob_hessian(&self, x: usize, a: usize) -> DMatrix<f64> {
        let probs = self.action_probs(x);
        let mean = self.features[x].tr_mul(&probs);
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for b in 0..self.n_actions() {
            let c = self.feature(x, b) - &mean;
            cov += probs[b] * &c * c.transpose();
        }
        let c = self.feature(x, a) - &mean;
        probs[a] * (&c * c.transpose() - cov)
    }

    /// `max_{x,a} ‖φ(a|x)‖₂`.
    pub fn b2(&self) -> f64 {
        self.features
            .iter()
            .flat_map(|f| f.row_iter().map(|r| r.norm()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// `max_{x,a} ‖φ(a|x)‖_∞`.
    pub fn b_inf(&self) -> f64 {
        self.features
            .iter()
            .flat_map(|f| f.iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

impl DifferentiablePolicy for SoftmaxPolicy {
    fn n_states(&self) -> usize {
        self.features.len()
    }

    fn n_actions(&self) -> usize {
        self.features[0].nrows()
    }

    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn probabilities(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_states(), self.n_actions());
        for x in 0..self.n_states() {
            p.set_row(x, &self.action_probs(x).transpose());
        }
        p
    }

    fn prob_gradient(&self, x: usize, a: usize) -> DVector<f64> {
        let probs = self.action_probs(x);
        let mean = self.features[x].tr_mul(&probs);
        (self.feature(x, a) - mean) * probs[a]
    }
}

/// Tabular policy `π_θ(a|x) = θ_{x·|A|+a}`, the classical direct
/// parameterization; `θ` must lie on the product of simplices.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    table: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(table: DMatrix<f64>) -> Result<Self> {
        check_policy_table(&table)?;
        Ok(Self { table })
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }
}

impl DifferentiablePolicy for TabularPolicy {
    fn n_states(&self) -> usize {
        self.table.nrows()
    }

    fn n_actions(&self) -> usize {
        self.table.ncols()
    }

    fn dim(&self) -> usize {
        self.table.len()
    }

    fn probabilities(&self) -> DMatrix<f64> {
        self.table.clone()
    }

    fn prob_gradient(&self, x: usize, a: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        g[x * self.n_actions() + a] = 1.0;
        g
    }
}

/// Checks that each row of a policy table is a probability distribution.
pub fn check_policy_table(table: &DMatrix<f64>) -> Result<()> {
    for x in 0..table.nrows() {
        let row = table.row(x);
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!("policy row {x} has an invalid entry")));
        }
        if (row.sum() - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidArgument(format!("policy row {x} sums to {}", row.sum())));
        }
    }
    Ok(())
}

/// Checks that `v` is a probability vector of length `n`.
pub fn check_distribution(v: &DVector<f64>, n: usize, what: &'static str) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what,
            expected: n,
            got: v.len(),
        });
    }
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) || (v.sum() - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Uniform distribution over `n` states.
pub fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// `P^π(x'|x) = Σ_a π(a|x) P(x'|x,a)`.
pub fn policy_kernel(kernel: &Transitions, policy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kernel.check_policy(policy)?;
    let n = kernel.n_states();
    let mut out = DMatrix::zeros(n, n);
    for a in 0..kernel.n_actions() {
        let pa = kernel.action(a);
        for x in 0..n {
            let w = policy[(x, a)];
            if w != 0.0 {
                for y in 0..n {
                    out[(x, y)] += w * pa[(x, y)];
                }
            }
        }
    }
    Ok(out)
}

/// Expected reward `r^π(x) = Σ_a π(a|x) r(x,a)`.
pub fn policy_reward(rewards: &DMatrix<f64>, policy: &DMatrix<f64>) -> DVector<f64> {
    rewards.component_mul(policy).column_sum()
}

/// State and action values of a policy under a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Values {
    pub v: DVector<f64>,
    /// `q[(x, a)]`.
    pub q: DMatrix<f64>,
}

/// Solves `(I − γP^π)V = r^π` and sets `Q = r + γ P V`.
pub fn exact_values(
    kernel: &Transitions,
    policy: &DMatrix<f64>,
    rewards: &DMatrix<f64>,
    gamma: f64,
) -> Result<Values> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount(gamma));
    }
    if rewards.shape() != (kernel.n_states(), kernel.n_actions()) {
        return Err(Error::DimensionMismatch {
            what: "reward table size",
            expected: kernel.n_states() * kernel.n_actions(),
            got: rewards.len(),
        });
    }
    let p_pi = policy_kernel(kernel, policy)?;
    let n = kernel.n_states();
    let system = DMatrix::identity(n, n) - gamma * p_pi;
    let v = system
        .lu()
        .solve(&policy_reward(rewards, policy))
        .ok_or(Error::Singular("value solve"))?;
    Ok(Values {
        q: action_values(kernel, rewards, gamma, &v),
        v,
    })
}

/// `Q(x,a) = r(x,a) + γ Σ_{x'} P(x'|x,a) V(x')`.
pub fn action_values(
    kernel: &Transitions,
    rewards: &DMatrix<f64>,
    gamma: f64,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let mut q = rewards.clone();
    for a in 0..kernel.n_actions() {
        let next = kernel.action(a) * v;
        for x in 0..kernel.n_states() {
            q[(x, a)] += gamma * next[x];
        }
    }
    q
}

/// Which kernel produced a discounted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelTag {
    True,
    Model,
}

/// `ν̄_ρ^π = (1−γ) Σ_k γ^k ρᵀ (P^π)^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedDistribution {
    pub weights: DVector<f64>,
    pub start: DVector<f64>,
    pub kernel: KernelTag,
}

/// Closed form `(1−γ) ρᵀ (I − γP^π)^{-1}`, solved as a transposed system.
pub fn discounted_distribution(
    kernel_matrix: &DMatrix<f64>,
    rho: &DVector<f64>,
    gamma: f64,
    tag: KernelTag,
) -> Result<DiscountedDistribution> {
    let n = kernel_matrix.nrows();
    if kernel_matrix.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "kernel matrix columns",
            expected: n,
            got: kernel_matrix.ncols(),
        });
    }
    check_distribution(rho, n, "start distribution")?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let system = DMatrix::identity(n, n) - gamma * kernel_matrix.transpose();
    let weights = system
        .lu()
        .solve(&(rho * (1.0 - gamma)))
        .ok_or(Error::Singular("discounted distribution"))?;
    Ok(DiscountedDistribution {
        weights,
        start: rho.clone(),
        kernel: tag,
    })
}

/// `J_ρ(π) = Σ_x ρ(x) V(x)`.
pub fn performance(rho: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if rho.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "value vector",
            expected: rho.len(),
            got: v.len(),
        });
    }
    Ok(rho.dot(v))
}

/// Convenience: `J_ρ(π)` of a policy table under a kernel.
pub fn policy_performance(
    kernel: &Transitions,
    policy: &DMatrix<f64>,
    rewards: &DMatrix<f64>,
    gamma: f64,
    rho: &DVector<f64>,
) -> Result<f64> {
    let values = exact_values(kernel, policy, rewards, gamma)?;
    performance(rho, &values.v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value_iteration(kernel: &Transitions, policy: &DMatrix<f64>, r: &DMatrix<f64>, gamma: f64) -> DVector<f64> {
        let p = policy_kernel(kernel, policy).unwrap();
        let rp = policy_reward(r, policy);
        let mut v = DVector::zeros(kernel.n_states());
        for _ in 0..10_000 {
            v = &rp + gamma * &p * &v;
        }
        v
    }

    #[test]
    fn two_state_fixture_is_valid() {
        let mdp = TabularMdp::two_state();
        assert_eq!((mdp.n_states(), mdp.n_actions()), (2, 2));
        assert_eq!(mdp.transitions.prob(1, 0, 0), 0.2);
        assert_eq!(mdp.transitions.prob(0, 1, 0), 0.99);
        assert_eq!(mdp.rewards[(0, 1)], -0.1);
        assert_eq!(mdp.rewards[(1, 0)], 0.5);
        assert_eq!(mdp.gamma, 0.9);
    }

    #[test]
    fn three_state_fixture_layout() {
        let mdp = TabularMdp::three_state();
        assert_eq!((mdp.n_states(), mdp.n_actions()), (3, 2));
        assert_eq!(mdp.transitions.prob(0, 0, 1), 0.399999);
        assert_eq!(mdp.transitions.prob(1, 2, 1), 0.3);
        assert_eq!(mdp.rewards[(1, 1)], 0.8);
        assert_eq!(mdp.rewards[(2, 0)], -0.2);
    }

    #[test]
    fn json_roundtrip_uses_flat_layout() {
        let mdp = TabularMdp::three_state();
        let back = TabularMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn identity_kernel_is_valid() {
        let mdp = TabularMdp::new(Transitions::identity(3, 2), DMatrix::zeros(3, 2), 0.5).unwrap();
        assert!(validate_mdp(&mdp).is_ok());
    }

    #[test]
    fn scaled_row_names_the_row() {
        let mut m = Transitions::identity(3, 2).per_action;
        m[1][(2, 2)] = 1.001;
        match Transitions::new(m) {
            Err(Error::RowSum { action, state, .. }) => assert_eq!((action, state), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_entry_and_bad_discount_rejected() {
        let mut m = Transitions::identity(2, 1).per_action;
        m[0][(0, 0)] = 1.5;
        m[0][(0, 1)] = -0.5;
        assert!(matches!(Transitions::new(m), Err(Error::NegativeProbability { .. })));
        let err = TabularMdp::new(Transitions::identity(2, 1), DMatrix::zeros(2, 1), 1.0);
        assert_eq!(err, Err(Error::InvalidDiscount(1.0)));
    }

    #[test]
    fn policy_kernel_uniform_two_state() {
        let mdp = TabularMdp::two_state();
        let pi = DMatrix::from_element(2, 2, 0.5);
        let k = policy_kernel(&mdp.transitions, &pi).unwrap();
        assert!((k[(0, 0)] - 0.45).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn deterministic_policy_selects_rows() {
        let mdp = TabularMdp::three_state();
        let pi = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let k = policy_kernel(&mdp.transitions, &pi).unwrap();
        assert_eq!(k.row(0), mdp.transitions.action(1).row(0));
        assert_eq!(k.row(1), mdp.transitions.action(0).row(1));
        let id = policy_kernel(&Transitions::identity(3, 2), &pi).unwrap();
        assert_eq!(id, DMatrix::identity(3, 3));
    }

    #[test]
    fn policy_kernel_dimension_mismatch() {
        let mdp = TabularMdp::two_state();
        let pi = DMatrix::from_element(3, 2, 0.5);
        assert!(matches!(policy_kernel(&mdp.transitions, &pi), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_state_geometric_value() {
        let k = Transitions::identity(1, 1);
        let vals = exact_values(&k, &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), 0.9).unwrap();
        assert!((vals.v[0] - 10.0).abs() < 1e-12);
        assert!((vals.q[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_value() {
        let mdp = TabularMdp::three_state();
        let r = DMatrix::from_element(3, 2, -2.0);
        let pi = DMatrix::from_row_slice(3, 2, &[0.3, 0.7, 0.5, 0.5, 0.9, 0.1]);
        let vals = exact_values(&mdp.transitions, &pi, &r, 0.9).unwrap();
        for x in 0..3 {
            assert!((vals.v[x] + 20.0).abs() < 1e-12);
        }
        let rho = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        assert!((performance(&rho, &vals.v).unwrap() + 20.0).abs() < 1e-12);
    }

    #[test]
    fn three_state_uniform_matches_value_iteration() {
        let mdp = TabularMdp::three_state();
        let pi = DMatrix::from_element(3, 2, 0.5);
        let vals = exact_values(&mdp.transitions, &pi, &mdp.rewards, mdp.gamma).unwrap();
        let vi = value_iteration(&mdp.transitions, &pi, &mdp.rewards, mdp.gamma);
        assert!((&vals.v - vi).amax() < 1e-8);
        for x in 0..3 {
            let s: f64 = (0..2).map(|a| pi[(x, a)] * vals.q[(x, a)]).sum();
            assert!((s - vals.v[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn discounted_distribution_special_cases() {
        let mdp = TabularMdp::three_state();
        let pi = DMatrix::from_element(3, 2, 0.5);
        let k = policy_kernel(&mdp.transitions, &pi).unwrap();
        let rho = DVector::from_vec(vec![0.1, 0.6, 0.3]);
        let d = discounted_distribution(&k, &rho, 0.0, KernelTag::True).unwrap();
        assert!((d.weights - &rho).amax() < 1e-15);

        let delta = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let d = discounted_distribution(&DMatrix::identity(3, 3), &delta, 0.9, KernelTag::True).unwrap();
        assert!((d.weights - delta).amax() < 1e-14);
    }

    #[test]
    fn discounted_distribution_matches_series() {
        let mdp = TabularMdp::three_state();
        let pi = DMatrix::from_element(3, 2, 0.5);
        let k = policy_kernel(&mdp.transitions, &pi).unwrap();
        let rho = uniform(3);
        let d = discounted_distribution(&k, &rho, 0.9, KernelTag::True).unwrap();
        let mut row = rho.transpose();
        let mut acc = row.clone() * 0.0;
        let mut g = 1.0;
        for _ in 0..=2000 {
            acc += &row * g;
            row = &row * &k;
            g *= 0.9;
        }
        let series = acc.transpose() * 0.1;
        assert!((d.weights.clone() - series).amax() < 1e-10);
        assert!((d.weights.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_direct_uniform_and_gradients() {
        let pol = SoftmaxPolicy::direct(3, 2);
        let p = pol.probabilities();
        assert!(p.iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert_eq!(pol.b2(), 1.0);
        assert_eq!(pol.b_inf(), 1.0);
        let g0 = pol.prob_gradient(1, 0);
        let g1 = pol.prob_gradient(1, 1);
        assert!((&g0 + &g1).amax() < 1e-15);
        assert!((g0[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_hessian_matches_finite_difference_of_gradient() {
        let feats = vec![
            DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 0.8, -1.2, 0.1]),
            DMatrix::from_row_slice(3, 2, &[0.0, 0.4, 0.9, -0.7, 0.2, 0.6]),
        ];
        let pol = SoftmaxPolicy::new(feats, DVector::from_vec(vec![0.4, -0.9])).unwrap();
        let h = 1e-6;
        for x in 0..2 {
            for a in 0..3 {
                let hess = pol.prob_hessian(x, a);
                for i in 0..2 {
                    let mut tp = pol.theta().clone();
                    tp[i] += h;
                    let mut tm = pol.theta().clone();
                    tm[i] -= h;
                    let gp = pol.with_theta(tp).unwrap().prob_gradient(x, a);
                    let gm = pol.with_theta(tm).unwrap().prob_gradient(x, a);
                    let col = (gp - gm) / (2.0 * h);
                    assert!((hess.column(i) - col).amax() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn tabular_policy_gradient_is_indicator() {
        let pol = TabularPolicy::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 1.0, 0.0])).unwrap();
        let g = pol.prob_gradient(1, 0);
        assert_eq!(g.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(TabularPolicy::new(DMatrix::from_element(2, 2, 0.6)).is_err());
    }
}
