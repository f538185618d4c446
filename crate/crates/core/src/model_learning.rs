//! Projected-gradient model fitting and the model-based policy-gradient loop.
//!
//! A [`TabularModel`] is a tensor of logits `[action][state][next]` with a
//! softmax over the last axis. Both objectives are differentiated exactly:
//! the gradient-matching objective through the discounted-distribution and
//! value solves via `dX = (I − γP̂^π)^{-1}(…)`, the KL objective directly.
//!
//! The gradient-matching objective is minimized in its squared form
//! `‖∇J − ∇Ĵ‖₂²`, which has the same minimizers and a smooth gradient at zero;
//! reported losses are always the unsquared norm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::finite_mdp::{
    discounted_distribution, exact_values, performance, policy_kernel, DifferentiablePolicy, KernelTag,
    SoftmaxPolicy, TabularMdp, Transitions,
};
use crate::gradients::{
    gradient_report, projected_step, true_gradient, two_kernel_gradient, weighted_gradient, Direction,
    GradientCase, ProjectionSpec,
};
use crate::losses::kl_and_tv;
use crate::{Error, Result};

/// Learned kernel `P̂(y|x,a) = softmax_y(logits[a][x][y])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    n_states: usize,
    n_actions: usize,
    /// Flat, index `(a·|X| + x)·|X| + y`.
    logits: DVector<f64>,
}

impl TabularModel {
    /// All-zero logits, i.e. uniform next-state distributions.
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: DVector::zeros(n_actions * n_states * n_states),
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: DVector<f64>) -> Result<Self> {
        if logits.len() != n_actions * n_states * n_states {
            return Err(Error::DimensionMismatch {
                what: "model logits",
                expected: n_actions * n_states * n_states,
                got: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model logits"));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    /// Zero-mean log-probabilities of a strictly positive kernel.
    pub fn from_transitions(kernel: &Transitions) -> Result<Self> {
        let (nx, na) = (kernel.n_states(), kernel.n_actions());
        let mut logits = DVector::zeros(na * nx * nx);
        for a in 0..na {
            for x in 0..nx {
                let row: Vec<f64> = (0..nx).map(|y| kernel.prob(a, x, y).ln()).collect();
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("kernel has zero entries; logits would be infinite".into()));
                }
                let mean = row.iter().sum::<f64>() / nx as f64;
                for (y, v) in row.into_iter().enumerate() {
                    logits[(a * nx + x) * nx + y] = v - mean;
                }
            }
        }
        Self::from_logits(nx, na, logits)
    }

    pub fn logits(&self) -> &DVector<f64> {
        &self.logits
    }

    pub fn norm(&self) -> f64 {
        self.logits.norm()
    }

    pub fn transitions(&self) -> Transitions {
        let nx = self.n_states;
        let per_action = (0..self.n_actions)
            .map(|a| {
                let mut m = DMatrix::zeros(nx, nx);
                for x in 0..nx {
                    let base = (a * nx + x) * nx;
                    let row = self.logits.rows(base, nx);
                    let mx = row.max();
                    let e: Vec<f64> = row.iter().map(|l| (l - mx).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for y in 0..nx {
                        m[(x, y)] = e[y] / s;
                    }
                }
                m
            })
            .collect();
        Transitions::new_unchecked(per_action).expect("square blocks by construction")
    }

    /// Backpropagates `∂L/∂P̂[a](x,y)` through the row softmax.
    fn logit_gradient(&self, kernel: &Transitions, d_probs: &[DMatrix<f64>]) -> DVector<f64> {
        let nx = self.n_states;
        let mut g = DVector::zeros(self.logits.len());
        for a in 0..self.n_actions {
            let p = kernel.action(a);
            for x in 0..nx {
                let inner: f64 = (0..nx).map(|y| p[(x, y)] * d_probs[a][(x, y)]).sum();
                for y in 0..nx {
                    g[(a * nx + x) * nx + y] = p[(x, y)] * (d_probs[a][(x, y)] - inner);
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Paml,
    Kl,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paml" => Ok(Objective::Paml),
            "kl" | "mle" => Ok(Objective::Kl),
            _ => Err(Error::Unknown {
                kind: "objective",
                name: s.into(),
            }),
        }
    }
}

/// Which KL the KL objective minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `Σ_x ν(x) KL(P^π(·|x) ‖ P̂^π(·|x))`.
    PolicyKernel,
    /// `Σ_x ν(x) Σ_a π(a|x) KL(P(·|x,a) ‖ P̂(·|x,a))`, the population
    /// counterpart of maximum likelihood on observed transitions.
    StateAction,
}

/// Model-fitting and policy-update hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_lr: f64,
    pub policy_lr: f64,
    pub model_steps_per_epoch: usize,
    pub policy_steps_per_epoch: usize,
    pub epochs: usize,
    /// Bound on `‖logits‖₂`; `null` in JSON means unconstrained.
    #[serde(with = "radius_serde")]
    pub norm_budget: f64,
    #[serde(with = "radius_serde")]
    pub policy_radius: f64,
    pub objective: Objective,
    pub gradient_case: GradientCase,
    pub kl_form: KlForm,
    /// Skip fitting and plan with the true kernel.
    pub perfect_model: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_lr: 0.001,
            policy_lr: 0.1,
            model_steps_per_epoch: 200,
            policy_steps_per_epoch: 1,
            epochs: 200,
            norm_budget: f64::INFINITY,
            policy_radius: f64::INFINITY,
            objective: Objective::Paml,
            gradient_case: GradientCase::C,
            kl_form: KlForm::StateAction,
            perfect_model: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_lr > 0.0) || !(self.policy_lr > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.model_steps_per_epoch == 0 || self.policy_steps_per_epoch == 0 {
            return Err(Error::InvalidArgument("step counts must be at least 1".into()));
        }
        if !(self.norm_budget > 0.0) || !(self.policy_radius > 0.0) {
            return Err(Error::InvalidArgument("norm budgets must be positive".into()));
        }
        Ok(())
    }
}

/// Serializes `∞` as JSON `null`.
mod radius_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Squared gradient-matching loss and its gradient with respect to the logits.
pub fn paml_objective(
    mdp: &TabularMdp,
    model: &TabularModel,
    policy: &SoftmaxPolicy,
    rho: &DVector<f64>,
    case: GradientCase,
) -> Result<(f64, DVector<f64>)> {
    let gamma = mdp.gamma;
    let nx = mdp.n_states();
    let na = mdp.n_actions();
    let probs = policy.probabilities();
    let p_hat = model.transitions();
    let grad_true = true_gradient(mdp, policy, rho)?;

    let model_dist = matches!(case, GradientCase::A | GradientCase::C);
    let model_critic = matches!(case, GradientCase::B | GradientCase::C);
    let (dist_kernel, critic_kernel) = case.kernels(&mdp.transitions, &p_hat);
    let d = discounted_distribution(&policy_kernel(dist_kernel, &probs)?, rho, gamma, KernelTag::Model)?.weights;
    let values = exact_values(critic_kernel, &probs, &mdp.rewards, gamma)?;
    let grad_model = weighted_gradient(policy, &d, &values.q, gamma);
    let diff = &grad_model - &grad_true;
    let loss = diff.norm_squared();
    let u = diff * 2.0;

    let grads: Vec<Vec<DVector<f64>>> = (0..nx)
        .map(|x| (0..na).map(|a| policy.prob_gradient(x, a)).collect())
        .collect();
    let p_hat_pi = policy_kernel(&p_hat, &probs)?;
    let lu = (DMatrix::identity(nx, nx) - gamma * &p_hat_pi).lu();
    let mut d_ppi = DMatrix::zeros(nx, nx);
    let mut d_p = vec![DMatrix::zeros(nx, nx); na];

    if model_dist {
        let s = DVector::from_fn(nx, |x, _| {
            (0..na).map(|a| values.q[(x, a)] * u.dot(&grads[x][a])).sum::<f64>() / (1.0 - gamma)
        });
        let z = lu.solve(&s).ok_or(Error::Singular("adjoint distribution solve"))?;
        d_ppi += gamma * &d * z.transpose();
    }
    if model_critic {
        let c = DMatrix::from_fn(nx, na, |x, a| d[x] * u.dot(&grads[x][a]) / (1.0 - gamma));
        let mut e = DVector::zeros(nx);
        for (a, dp) in d_p.iter_mut().enumerate() {
            *dp += gamma * c.column(a) * values.v.transpose();
            e += p_hat.action(a).tr_mul(&c.column(a));
        }
        let w = (DMatrix::identity(nx, nx) - gamma * p_hat_pi.transpose())
            .lu()
            .solve(&e)
            .ok_or(Error::Singular("adjoint value solve"))?;
        d_ppi += gamma * gamma * w * values.v.transpose();
    }
    for a in 0..na {
        for x in 0..nx {
            let pa = probs[(x, a)];
            for y in 0..nx {
                d_p[a][(x, y)] += pa * d_ppi[(x, y)];
            }
        }
    }
    Ok((loss, model.logit_gradient(&p_hat, &d_p)))
}

/// KL objective and its gradient with respect to the logits.
pub fn kl_objective(
    mdp: &TabularMdp,
    model: &TabularModel,
    probs: &DMatrix<f64>,
    nu: &DVector<f64>,
    form: KlForm,
) -> Result<(f64, DVector<f64>)> {
    let nx = mdp.n_states();
    let na = mdp.n_actions();
    let p_hat = model.transitions();
    match form {
        KlForm::PolicyKernel => {
            let p_pi = policy_kernel(&mdp.transitions, probs)?;
            let q_pi = policy_kernel(&p_hat, probs)?;
            let rep = kl_and_tv(&p_pi, &q_pi, nu)?;
            let mut d_p = vec![DMatrix::zeros(nx, nx); na];
            for x in 0..nx {
                for y in 0..nx {
                    if p_pi[(x, y)] == 0.0 {
                        continue;
                    }
                    let g = -nu[x] * p_pi[(x, y)] / q_pi[(x, y)];
                    for a in 0..na {
                        d_p[a][(x, y)] = probs[(x, a)] * g;
                    }
                }
            }
            Ok((rep.kl_avg, model.logit_gradient(&p_hat, &d_p)))
        }
        KlForm::StateAction => {
            let mut loss = 0.0;
            let mut g = DVector::zeros(model.logits.len());
            for a in 0..na {
                for x in 0..nx {
                    let w = nu[x] * probs[(x, a)];
                    for y in 0..nx {
                        let (p, q) = (mdp.transitions.prob(a, x, y), p_hat.prob(a, x, y));
                        if p > 0.0 {
                            loss += w * p * (p / q).ln();
                        }
                        g[(a * nx + x) * nx + y] = w * (q - p);
                    }
                }
            }
            Ok((loss, g))
        }
    }
}

/// Weighting for the KL objective: `ν̄_ρ^π` under the true kernel.
pub fn on_policy_weights(mdp: &TabularMdp, probs: &DMatrix<f64>, rho: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(discounted_distribution(&policy_kernel(&mdp.transitions, probs)?, rho, mdp.gamma, KernelTag::True)?.weights)
}

/// Runs `config.model_steps_per_epoch` projected-GD steps on the configured
/// objective, starting from `init`.
pub fn fit_model(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    rho: &DVector<f64>,
    init: &TabularModel,
    config: &TrainConfig,
) -> Result<TabularModel> {
    fit_model_steps(mdp, policy, rho, init, config, config.model_steps_per_epoch, config.model_lr)
}

/// [`fit_model`] with an explicit step count and learning rate.
pub fn fit_model_steps(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    rho: &DVector<f64>,
    init: &TabularModel,
    config: &TrainConfig,
    steps: usize,
    lr: f64,
) -> Result<TabularModel> {
    let proj = ProjectionSpec::ball(config.norm_budget);
    let probs = policy.probabilities();
    let nu = on_policy_weights(mdp, &probs, rho)?;
    let mut model = init.clone();
    model.logits = proj.project(model.logits);
    for _ in 0..steps {
        let (loss, grad) = match config.objective {
            Objective::Paml => paml_objective(mdp, &model, policy, rho, config.gradient_case)?,
            Objective::Kl => kl_objective(mdp, &model, &probs, &nu, config.kl_form)?,
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("model-fitting loss"));
        }
        model.logits = projected_step(&model.logits, &grad, lr, proj, Direction::Descend)?;
    }
    Ok(model)
}

/// One row of a training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// True performance of the policy the model was fitted for.
    #[serde(rename = "J")]
    pub j: f64,
    pub paml: f64,
    pub kl: f64,
    pub model_norm: f64,
    pub policy_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub rows: Vec<EpochRow>,
    pub final_policy: SoftmaxPolicy,
    pub final_model: TabularModel,
    /// True performance after the last policy update.
    pub final_j: f64,
}

impl TrainingRecord {
    pub const CSV_HEADER: &'static str = "epoch,J,paml,kl,model_norm,policy_norm";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.j, r.paml, r.kl, r.model_norm, r.policy_norm
            ));
        }
        out
    }

    pub fn summary(&self, config: &TrainConfig) -> serde_json::Value {
        let last = self.rows.last();
        serde_json::json!({
            "final_J": self.final_j,
            "final_paml": last.map(|r| r.paml),
            "final_kl": last.map(|r| r.kl),
            "final_model_norm": self.final_model.norm(),
            "final_policy_norm": self.final_policy.theta().norm(),
            "final_theta": self.final_policy.theta().iter().collect::<Vec<_>>(),
            "epochs": self.rows.len(),
            "seed": config.seed,
            "config": config,
        })
    }
}

/// Model-based policy-gradient loop with exact gradients.
///
/// Each epoch fits the model to the current policy (warm-started from the
/// previous epoch's model), records the true performance and the model's
/// losses, then takes `policy_steps_per_epoch` projected ascent steps along
/// the model gradient of the configured case. Rewards are known to the planner.
pub fn mbrl_loop(
    mdp: &TabularMdp,
    initial_policy: &SoftmaxPolicy,
    rho: &DVector<f64>,
    config: &TrainConfig,
) -> Result<TrainingRecord> {
    config.validate()?;
    let policy_proj = ProjectionSpec::ball(config.policy_radius);
    let mut policy = initial_policy.clone();
    let mut model = TabularModel::zeros(mdp.n_states(), mdp.n_actions());
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let kernel = if config.perfect_model {
            mdp.transitions.clone()
        } else {
            model = fit_model(mdp, &policy, rho, &model, config)?;
            model.transitions()
        };
        let probs = policy.probabilities();
        let j = performance(rho, &exact_values(&mdp.transitions, &probs, &mdp.rewards, mdp.gamma)?.v)?;
        let paml = gradient_report(mdp, &kernel, &policy, rho, config.gradient_case)?.paml_loss;
        let nu = on_policy_weights(mdp, &probs, rho)?;
        let kl = kl_and_tv(&policy_kernel(&mdp.transitions, &probs)?, &policy_kernel(&kernel, &probs)?, &nu)?.kl_avg;
        rows.push(EpochRow {
            epoch,
            j,
            paml,
            kl,
            model_norm: if config.perfect_model { f64::NAN } else { model.norm() },
            policy_norm: policy.theta().norm(),
        });
        for _ in 0..config.policy_steps_per_epoch {
            let (p1, p2) = config.gradient_case.kernels(&mdp.transitions, &kernel);
            let g = two_kernel_gradient(p1, p2, &policy, rho, &mdp.rewards, mdp.gamma)?;
            let theta = projected_step(policy.theta(), &g, config.policy_lr, policy_proj, Direction::Ascend)?;
            policy = policy.with_theta(theta)?;
        }
    }
    let final_j = performance(
        rho,
        &exact_values(&mdp.transitions, &policy.probabilities(), &mdp.rewards, mdp.gamma)?.v,
    )?;
    Ok(TrainingRecord {
        rows,
        final_policy: policy,
        final_model: model,
        final_j,
    })
}

/// Norm budgets swept by default.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Settings for the fixed-policy fits of a norm-budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub fit_lr: f64,
    pub fit_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            fit_lr: 0.05,
            fit_steps: 5000,
        }
    }
}

/// Results for one norm budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    /// Gradient-matching loss of the model fitted with each objective, at the initial policy.
    pub paml_of_paml_fit: f64,
    pub paml_of_kl_fit: f64,
    pub kl_of_paml_fit: f64,
    pub kl_of_kl_fit: f64,
    pub paml_agent: TrainingRecord,
    pub kl_agent: TrainingRecord,
}

/// Fits both objectives for the initial policy at every budget, then runs the
/// full loop once per objective and budget.
pub fn lambda_sweep(
    mdp: &TabularMdp,
    initial_policy: &SoftmaxPolicy,
    rho: &DVector<f64>,
    train: &TrainConfig,
    sweep: &SweepConfig,
) -> Result<Vec<SweepPoint>> {
    let probs = initial_policy.probabilities();
    let nu = on_policy_weights(mdp, &probs, rho)?;
    let p_pi = policy_kernel(&mdp.transitions, &probs)?;
    let zero = TabularModel::zeros(mdp.n_states(), mdp.n_actions());
    sweep
        .lambdas
        .iter()
        .map(|&lambda| {
            let with = |objective| TrainConfig {
                norm_budget: lambda,
                objective,
                ..train.clone()
            };
            let measure = |m: &TabularModel| -> Result<(f64, f64)> {
                let k = m.transitions();
                let paml = gradient_report(mdp, &k, initial_policy, rho, train.gradient_case)?.paml_loss;
                let kl = kl_and_tv(&p_pi, &policy_kernel(&k, &probs)?, &nu)?.kl_avg;
                Ok((paml, kl))
            };
            let paml_fit = fit_model_steps(mdp, initial_policy, rho, &zero, &with(Objective::Paml), sweep.fit_steps, sweep.fit_lr)?;
            let kl_fit = fit_model_steps(mdp, initial_policy, rho, &zero, &with(Objective::Kl), sweep.fit_steps, sweep.fit_lr)?;
            let (paml_of_paml_fit, kl_of_paml_fit) = measure(&paml_fit)?;
            let (paml_of_kl_fit, kl_of_kl_fit) = measure(&kl_fit)?;
            Ok(SweepPoint {
                lambda,
                paml_of_paml_fit,
                paml_of_kl_fit,
                kl_of_paml_fit,
                kl_of_kl_fit,
                paml_agent: mbrl_loop(mdp, initial_policy, rho, &with(Objective::Paml))?,
                kl_agent: mbrl_loop(mdp, initial_policy, rho, &with(Objective::Kl))?,
            })
        })
        .collect()
}
