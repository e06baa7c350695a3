//! Group-relative policy optimization over tree experience.
//!
//! For one group of `G` sampled outputs with scalar rewards `pr_i`:
//!
//! ```text
//! Â_i   = (pr_i − mean(pr)) / std(pr)              population std
//! ρ_ik  = exp(log π_θ(tok_ik) − log π_old(tok_ik))
//! J     = 1/Σ|a_i| · Σ_i Σ_k min(ρ_ik Â_i, clip(ρ_ik, 1−ε_low, 1+ε_high) Â_i)
//!         − β · mean_ik k3(π_θ, π_ref)
//! ```
//!
//! The batch loss is `−mean_groups J`. The same machinery trains the reward
//! model, where each output is a single label token.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::policy::{ActionText, AgentState, Policy};

/// Threshold on the population std below which a group carries no signal.
pub const MIN_GROUP_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub lr0: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub valid_samples_per_iteration: usize,
    /// Schedule length in optimizer steps; 0 derives it from the run length.
    pub total_steps: usize,
    /// Fixed number of optimizer steps per iteration instead of
    /// `batch_size` chunks; 0 disables.
    pub steps_per_iter: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            lr0: 1e-3,
            warmup_ratio: 0.05,
            batch_size: 128,
            valid_samples_per_iteration: 512,
            total_steps: 0,
            steps_per_iter: 0,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Learning rate used for billion-parameter backbones.
    pub fn paper_scale() -> Self {
        Self { lr0: 1e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim.{m}")));
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return bad("need 0 < eps_low <= eps_high < 1");
        }
        // Negated so NaN is rejected.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be > 0");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)");
        }
        if self.batch_size < 1 || self.valid_samples_per_iteration < 1 {
            return bad("batch_size and valid_samples_per_iteration must be >= 1");
        }
        Ok(())
    }
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub fn is_valid_group(pr: &[f64]) -> bool {
    pr.len() >= 2 && population_std(pr) > MIN_GROUP_STD
}

/// Group-normalized advantages. Errors on degenerate groups.
pub fn group_advantages(pr: &[f64]) -> Result<Vec<f64>> {
    if !is_valid_group(pr) {
        return Err(Error::InvalidGroup(format!("zero spread in rewards {pr:?}")));
    }
    let n = pr.len() as f64;
    let mean = pr.iter().sum::<f64>() / n;
    let std = population_std(pr);
    Ok(pr.iter().map(|p| (p - mean) / std).collect())
}

pub fn importance_ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).exp()
}

pub fn clipped_token_objective(rho: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps_low, 1.0 + eps_high) * adv)
}

/// `r − ln r − 1` with `r = π_ref / π_θ`.
pub fn k3_kl(logp_current: f64, logp_ref: f64) -> f64 {
    let log_r = logp_ref - logp_current;
    // expm1 keeps precision when r is close to 1.
    log_r.exp_m1() - log_r
}

/// A group of scored outputs for one input.
pub trait ScoredGroup: Sync {
    type Model: Sync + ?Sized;

    fn rewards(&self) -> &[f64];
    fn old_logprobs(&self) -> &[Vec<f64>];
    fn item_logprobs(&self, model: &Self::Model, params: &ParamVector, i: usize) -> Result<Vec<f64>>;
    fn accumulate_item_grad(
        &self,
        model: &Self::Model,
        params: &ParamVector,
        i: usize,
        weights: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupSource {
    PolicyTree,
    RewardModelGroup,
}

/// `(s_t, {a_i}, {pr_i})` extracted from one tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceGroup {
    pub state: AgentState,
    pub actions: Vec<ActionText>,
    pub pr: Vec<f64>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub source: GroupSource,
}

impl ScoredGroup for ExperienceGroup {
    type Model = Policy;

    fn rewards(&self) -> &[f64] {
        &self.pr
    }

    fn old_logprobs(&self) -> &[Vec<f64>] {
        &self.old_logprobs
    }

    fn item_logprobs(&self, model: &Policy, params: &ParamVector, i: usize) -> Result<Vec<f64>> {
        Ok(model.logprob(params, &self.state, &self.actions[i])?.0)
    }

    fn accumulate_item_grad(
        &self,
        model: &Policy,
        params: &ParamVector,
        i: usize,
        weights: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        model.accumulate_grad_logprob(params, &self.state, &self.actions[i], weights, grad)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub mean_kl: f64,
    pub tokens: usize,
    pub groups: usize,
}

struct GroupTerms {
    objective: f64,
    grad: ParamVector,
    ratio_sum: f64,
    clipped: usize,
    kl_sum: f64,
    tokens: usize,
}

fn group_terms<G: ScoredGroup>(
    group: &G,
    model: &G::Model,
    params: &ParamVector,
    reference: &ParamVector,
    config: &OptimConfig,
    batch_groups: f64,
) -> Result<GroupTerms> {
    let adv = group_advantages(group.rewards())?;
    let olds = group.old_logprobs();
    if olds.len() != adv.len() {
        return Err(Error::InvalidGroup(format!(
            "{} old log-prob rows for {} outputs",
            olds.len(),
            adv.len()
        )));
    }
    let n_tok: usize = olds.iter().map(|o| o.len()).sum();
    let inv_tok = 1.0 / n_tok as f64;
    let (lo, hi) = (1.0 - config.eps_low, 1.0 + config.eps_high);
    let mut grad = ParamVector::zeros(params.dims);
    let (mut surrogate, mut kl_sum, mut ratio_sum, mut clipped) = (0.0, 0.0, 0.0, 0);
    for (i, a) in adv.iter().enumerate() {
        let new = group.item_logprobs(model, params, i)?;
        if new.len() != olds[i].len() {
            return Err(Error::InvalidGroup(format!("output {i}: token count changed")));
        }
        let refs = if config.beta > 0.0 {
            Some(group.item_logprobs(model, reference, i)?)
        } else {
            None
        };
        let mut weights = vec![0.0; new.len()];
        for k in 0..new.len() {
            let rho = importance_ratio(new[k], olds[i][k]);
            ratio_sum += rho;
            let unclipped = rho * a;
            let obj = clipped_token_objective(rho, *a, config.eps_low, config.eps_high);
            surrogate += obj;
            // d/dlogπ of the objective; zero on the clipped branch.
            let mut d = if unclipped <= rho.clamp(lo, hi) * a { unclipped } else { 0.0 };
            if d == 0.0 && (rho < lo || rho > hi) {
                clipped += 1;
            }
            if let Some(refs) = &refs {
                kl_sum += k3_kl(new[k], refs[k]);
                let r = (refs[k] - new[k]).exp();
                d -= config.beta * (1.0 - r);
            }
            // Minimization of −J averaged over groups.
            weights[k] = -d * inv_tok / batch_groups;
        }
        group.accumulate_item_grad(model, params, i, &weights, &mut grad)?;
    }
    let objective = (surrogate - config.beta * kl_sum) * inv_tok;
    Ok(GroupTerms { objective, grad, ratio_sum, clipped, kl_sum, tokens: n_tok })
}

/// Loss and gradient of the clipped group objective over a batch.
/// Groups are evaluated in parallel and reduced in order.
pub fn grpo_loss_and_grad<G: ScoredGroup>(
    batch: &[G],
    model: &G::Model,
    params: &ParamVector,
    reference: &ParamVector,
    config: &OptimConfig,
) -> Result<(f64, ParamVector, GrpoStats)> {
    if batch.is_empty() {
        return Err(Error::InvalidGroup("empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|g| !is_valid_group(g.rewards())) {
        return Err(Error::InvalidGroup(format!(
            "group {i} has zero reward spread; filter before training"
        )));
    }
    let n = batch.len() as f64;
    let terms: Vec<GroupTerms> = batch
        .par_iter()
        .map(|g| group_terms(g, model, params, reference, config, n))
        .collect::<Result<_>>()?;
    let mut grad = ParamVector::zeros(params.dims);
    let mut objective = 0.0;
    let mut stats = GrpoStats { groups: batch.len(), ..Default::default() };
    let (mut ratio, mut kl, mut clipped) = (0.0, 0.0, 0);
    for t in &terms {
        objective += t.objective;
        grad.add_scaled(&t.grad, 1.0);
        ratio += t.ratio_sum;
        kl += t.kl_sum;
        clipped += t.clipped;
        stats.tokens += t.tokens;
    }
    let tok = stats.tokens.max(1) as f64;
    stats.mean_ratio = ratio / tok;
    stats.mean_kl = kl / tok;
    stats.clip_frac = clipped as f64 / tok;
    Ok((-objective / n, grad, stats))
}

/// Tree-GRPO on policy experience.
pub fn tree_grpo_loss_and_grad(
    batch: &[ExperienceGroup],
    policy: &Policy,
    params: &ParamVector,
    reference: &ParamVector,
    config: &OptimConfig,
) -> Result<(f64, ParamVector, GrpoStats)> {
    grpo_loss_and_grad(batch, policy, params, reference, config)
}

/// Linear warmup then cosine decay to zero.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    if step < warmup {
        return lr0 * step / warmup;
    }
    if total <= warmup {
        return lr0;
    }
    let progress = (step - warmup) / (total - warmup);
    lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// `θ − lr·grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.dims != grad.dims {
        return Err(Error::Input("gradient shape does not match parameters".into()));
    }
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient entry {} is {} (step with lr {lr})",
            grad.segment_of(i),
            grad.values[i]
        )));
    }
    let mut next = params.clone();
    next.add_scaled(grad, -lr);
    Ok(next)
}

/// Adam moments, owned by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(
        &mut self,
        params: &ParamVector,
        grad: &ParamVector,
        lr: f64,
        config: &OptimConfig,
    ) -> Result<ParamVector> {
        // Reuse the finiteness and shape checks.
        sgd_step(params, grad, 0.0)?;
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut next = params.clone();
        for (i, g) in grad.values.iter().enumerate() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            next.values[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
        }
        Ok(next)
    }
}

/// Plain SGD or Adam behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamState::new(n)),
        }
    }

    pub fn step(
        &mut self,
        params: &ParamVector,
        grad: &ParamVector,
        lr: f64,
        config: &OptimConfig,
    ) -> Result<ParamVector> {
        match self {
            Self::Sgd => sgd_step(params, grad, lr),
            Self::Adam(state) => state.step(params, grad, lr, config),
        }
    }
}

/// One GRPO step on reward-model groups whose rewards are 0/1 matches.
/// Degenerate groups are dropped; an empty remainder is an error.
pub fn grpo_scalar_reward_update<G: ScoredGroup>(
    groups: &[G],
    model: &G::Model,
    params: &ParamVector,
    config: &OptimConfig,
    lr: f64,
) -> Result<(ParamVector, GrpoStats)> {
    let valid: Vec<&G> = groups.iter().filter(|g| is_valid_group(g.rewards())).collect();
    if valid.is_empty() {
        return Err(Error::InvalidGroup("every reward group has zero spread".into()));
    }
    let (_, grad, stats) = grpo_loss_and_grad(&valid, model, params, params, config)?;
    Ok((sgd_step(params, &grad, lr)?, stats))
}

impl<G: ScoredGroup> ScoredGroup for &G {
    type Model = G::Model;

    fn rewards(&self) -> &[f64] {
        (**self).rewards()
    }

    fn old_logprobs(&self) -> &[Vec<f64>] {
        (**self).old_logprobs()
    }

    fn item_logprobs(&self, model: &Self::Model, params: &ParamVector, i: usize) -> Result<Vec<f64>> {
        (**self).item_logprobs(model, params, i)
    }

    fn accumulate_item_grad(
        &self,
        model: &Self::Model,
        params: &ParamVector,
        i: usize,
        weights: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        (**self).accumulate_item_grad(model, params, i, weights, grad)
    }
}
