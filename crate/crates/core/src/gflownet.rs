//! E-step machinery: forward-looking rewards, the subtrajectory-balance
//! loss and its gradient, and the sampler update.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EventSequence, PredicateId};
use crate::policy::{Condition, Exploration, LinearPolicy, PolicyParams, Rollout};
use crate::tlpp::{RuleWeights, Tlpp};
use crate::tree::{LogicTree, Trajectory};

/// Log-rewards are clamped below at this value.
pub const LOG_REWARD_FLOOR: f64 = -1e6;

#[derive(Debug, Error, PartialEq)]
pub enum GflownetError {
    #[error("reward trace has {rewards} entries for {states} states")]
    MisalignedTrace { rewards: usize, states: usize },
}

/// Unnormalized log-reward of a state, evaluated as if every frontier
/// leaf were terminated.
pub trait RewardFn: Sync {
    fn log_reward(&self, state: &LogicTree) -> f64;
}

/// `log r(R) = -nll(X | R) + log p(Y | X, R) + log p_φ(R)`.
pub struct PosteriorReward<'a> {
    pub tlpp: &'a Tlpp,
    pub sequence: &'a EventSequence,
    pub label: PredicateId,
    pub weights: &'a RuleWeights,
    pub prior: &'a LinearPolicy,
}

impl PosteriorReward<'_> {
    /// The three reward terms for the terminated version of `state`.
    pub fn terms(&self, state: &LogicTree) -> (f64, f64, f64) {
        let tree = state.terminated();
        let paths = tree.paths();
        let nll = self.tlpp.nll(self.sequence, self.weights, &paths);
        let probs = self.tlpp.predict_label_dist(self.sequence, self.weights, &paths);
        let yi = self
            .tlpp
            .targets()
            .iter()
            .position(|&t| t == self.label)
            .expect("label must be a target");
        let prior = self
            .prior
            .tree_logprob(&tree, None)
            .unwrap_or(f64::NEG_INFINITY);
        (-nll, probs[yi].ln(), prior)
    }
}

impl RewardFn for PosteriorReward<'_> {
    fn log_reward(&self, state: &LogicTree) -> f64 {
        let (a, b, c) = self.terms(state);
        floor_log_reward(a + b + c)
    }
}

/// Fixed log-rewards for terminal trees; anything missing gets `default`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableReward {
    pub table: BTreeMap<LogicTree, f64>,
    pub default: f64,
}

impl RewardFn for TableReward {
    fn log_reward(&self, state: &LogicTree) -> f64 {
        let tree = state.terminated();
        floor_log_reward(self.table.get(&tree).copied().unwrap_or(self.default))
    }
}

fn floor_log_reward(v: f64) -> f64 {
    if v.is_nan() {
        LOG_REWARD_FLOOR
    } else {
        v.max(LOG_REWARD_FLOOR)
    }
}

/// `log r(R_i)` for every state of a trajectory.
pub fn reward_trace(trajectory: &Trajectory, reward: &dyn RewardFn) -> Vec<f64> {
    trajectory.states.iter().map(|s| reward.log_reward(s)).collect()
}

/// Per-state and per-transition log-probabilities under `policy`.
fn trajectory_terms(
    policy: &LinearPolicy,
    trajectory: &Trajectory,
    condition: Option<&Condition>,
) -> (Vec<f64>, Vec<f64>) {
    let forward = trajectory
        .states
        .iter()
        .zip(&trajectory.choices)
        .map(|(s, c)| policy.level_logprob(s, c, condition))
        .collect();
    let stop = trajectory
        .states
        .iter()
        .map(|s| policy.stop_logprob(s, condition))
        .collect();
    (forward, stop)
}

/// Residuals `δ_ij` for `0 ≤ i < j ≤ t`, row-major over `(i, j)`.
fn residuals(log_rewards: &[f64], forward: &[f64], stop: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = log_rewards.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        let mut acc = 0.0;
        for j in i + 1..n {
            acc += forward[j - 1];
            let d = log_rewards[i] + acc + stop[j] - log_rewards[j] - stop[i];
            out.push((i, j, d));
        }
    }
    out
}

/// Subtrajectory-balance loss of one trajectory (no gradient).
pub fn subtb_loss_value(
    policy: &LinearPolicy,
    trajectory: &Trajectory,
    log_rewards: &[f64],
    condition: Option<&Condition>,
) -> Result<f64, GflownetError> {
    check_trace(trajectory, log_rewards)?;
    let (forward, stop) = trajectory_terms(policy, trajectory, condition);
    Ok(residuals(log_rewards, &forward, &stop)
        .iter()
        .map(|(_, _, d)| d * d)
        .sum())
}

/// Subtrajectory-balance loss and its gradient with respect to the policy
/// parameters.
pub fn subtb_loss(
    policy: &LinearPolicy,
    trajectory: &Trajectory,
    log_rewards: &[f64],
    condition: Option<&Condition>,
) -> Result<(f64, PolicyParams), GflownetError> {
    let mut grad = policy.zero_grad();
    let loss = accumulate_subtb(policy, trajectory, log_rewards, condition, 1.0, &mut grad)?;
    Ok((loss, grad))
}

fn check_trace(trajectory: &Trajectory, log_rewards: &[f64]) -> Result<(), GflownetError> {
    if trajectory.states.len() != log_rewards.len() {
        return Err(GflownetError::MisalignedTrace {
            rewards: log_rewards.len(),
            states: trajectory.states.len(),
        });
    }
    Ok(())
}

/// Adds `scale * ∇L` into `grad` and returns `L`.
pub fn accumulate_subtb(
    policy: &LinearPolicy,
    trajectory: &Trajectory,
    log_rewards: &[f64],
    condition: Option<&Condition>,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<f64, GflownetError> {
    check_trace(trajectory, log_rewards)?;
    let (forward, stop) = trajectory_terms(policy, trajectory, condition);
    let res = residuals(log_rewards, &forward, &stop);
    let n = log_rewards.len();
    // dL/d forward[k-1] and dL/d stop[j].
    let mut cf = vec![0.0; n.saturating_sub(1)];
    let mut cs = vec![0.0; n];
    let mut loss = 0.0;
    for &(i, j, d) in &res {
        loss += d * d;
        for c in &mut cf[i..j] {
            *c += 2.0 * d;
        }
        cs[j] += 2.0 * d;
        cs[i] -= 2.0 * d;
    }
    for (k, (state, choice)) in trajectory.states.iter().zip(&trajectory.choices).enumerate() {
        if cf[k] != 0.0 {
            policy.accumulate_level_grad(state, choice, condition, scale * cf[k], grad);
        }
    }
    for (state, &c) in trajectory.states.iter().zip(&cs) {
        if c != 0.0 {
            policy.accumulate_stop_grad(state, condition, scale * c, grad);
        }
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Per-parameter step normalized by a running mean of squared
    /// gradients.
    #[default]
    Rmsprop,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Step size at the final scheduled step as a fraction of `lr`; the
    /// schedule is linear in between.
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr: 5e-4,
            rho: 0.99,
            eps: 1e-8,
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Multiplier on `lr` at `step` of `total`.
    pub fn schedule_factor(&self, step: u64, total: Option<u64>) -> f64 {
        match total {
            Some(total) if total > 0 => {
                let frac = (step as f64 / total as f64).min(1.0);
                1.0 - frac * (1.0 - self.final_lr_fraction)
            }
            _ => 1.0,
        }
    }

    /// Scheduled step size at `step` of `total`.
    pub fn lr_at(&self, step: u64, total: Option<u64>) -> f64 {
        self.lr * self.schedule_factor(step, total)
    }

    /// Change to apply to one scalar parameter for a descent step.
    fn delta(&self, lr: f64, sq: &mut f64, g: f64) -> f64 {
        match self.kind {
            OptimizerKind::Sgd => -lr * g,
            OptimizerKind::Rmsprop => {
                *sq = self.rho * *sq + (1.0 - self.rho) * g * g;
                -lr * g / (sq.sqrt() + self.eps)
            }
        }
    }
}

/// Optimizer state for a dense parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseOptimizer {
    pub config: OptimizerConfig,
    pub sq: Vec<f64>,
}

impl DenseOptimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        Self {
            config,
            sq: vec![0.0; len],
        }
    }

    pub fn descend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, &g), sq) in params.iter_mut().zip(grad).zip(&mut self.sq) {
            *p += self.config.delta(lr, sq, g);
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, &g), sq) in params.iter_mut().zip(grad).zip(&mut self.sq) {
            *p += self.config.delta(lr, sq, -g);
        }
    }
}

/// Optimizer state for [`RuleWeights`], keyed by rule path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOptimizer {
    pub config: OptimizerConfig,
    #[serde(with = "sq_map")]
    pub sq: BTreeMap<crate::tree::RulePath, f64>,
    pub sq_base: Vec<f64>,
}

mod sq_map {
    use super::*;
    use crate::tree::RulePath;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<RulePath, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, &v)| (k.0.clone(), v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<RulePath, f64>, D::Error> {
        let v = Vec::<(Vec<usize>, f64)>::deserialize(d)?;
        Ok(v.into_iter().map(|(k, x)| (RulePath(k), x)).collect())
    }
}

impl WeightOptimizer {
    pub fn new(config: OptimizerConfig, n_predicates: usize) -> Self {
        Self {
            config,
            sq: BTreeMap::new(),
            sq_base: vec![0.0; n_predicates],
        }
    }

    /// Gradient ascent; rule entries missing from `weights` start at 0.
    pub fn ascend(&mut self, weights: &mut RuleWeights, grad: &RuleWeights, lr: f64) {
        for (p, &g) in &grad.weights {
            let sq = self.sq.entry(p.clone()).or_insert(0.0);
            *weights.weights.entry(p.clone()).or_insert(0.0) += self.config.delta(lr, sq, -g);
        }
        for ((b, &g), sq) in weights.base.iter_mut().zip(&grad.base).zip(&mut self.sq_base) {
            *b += self.config.delta(lr, sq, -g);
        }
    }
}

// ---------------------------------------------------------------------------
// E-step

/// ε decays linearly from `epsilon_start` to `epsilon_end` over
/// `decay_steps` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationSchedule {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub decay_steps: Option<u64>,
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            epsilon_start: 0.05,
            epsilon_end: 0.0,
            decay_steps: None,
            temperature: 1.0,
            top_k: None,
        }
    }
}

impl ExplorationSchedule {
    pub fn at(&self, step: u64) -> Exploration {
        let epsilon = match self.decay_steps {
            Some(n) if n > 0 => {
                let f = (step as f64 / n as f64).min(1.0);
                self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
            }
            _ => self.epsilon_start,
        };
        Exploration {
            epsilon,
            temperature: self.temperature,
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EStepConfig {
    pub optimizer: OptimizerConfig,
    pub ema_beta: f64,
    pub exploration: ExplorationSchedule,
    /// Total number of scheduled updates, for step-size and ε schedules.
    pub total_steps: Option<u64>,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            ema_beta: 0.9,
            exploration: ExplorationSchedule::default(),
            total_steps: None,
        }
    }
}

/// Sampler parameters, optimizer state and the moving-average loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStepState {
    pub policy: LinearPolicy,
    pub optimizer: DenseOptimizer,
    pub ema: Option<f64>,
    pub step: u64,
}

impl EStepState {
    pub fn new(policy: LinearPolicy, config: &EStepConfig) -> Self {
        let n = policy.params.data.len();
        Self {
            policy,
            optimizer: DenseOptimizer::new(config.optimizer, n),
            ema: None,
            step: 0,
        }
    }
}

/// One batch element of an E-step.
pub struct EStepItem<'a> {
    pub roots: Vec<PredicateId>,
    pub condition: Option<Condition>,
    pub reward: &'a dyn RewardFn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepStats {
    pub step: u64,
    pub batch_loss: f64,
    pub ema: f64,
    pub mean_log_reward: f64,
    pub trees_sampled: usize,
    pub mean_tree_size: f64,
}

struct ItemResult {
    loss: f64,
    grad: PolicyParams,
    terminal_log_reward: f64,
    tree_size: usize,
}

/// Samples one trajectory per item, averages the SubTB loss over the
/// batch and applies one optimizer step to the sampler.
pub fn estep_update<R: Rng + ?Sized>(
    state: &mut EStepState,
    items: &[EStepItem<'_>],
    config: &EStepConfig,
    rng: &mut R,
) -> EStepStats {
    let exploration = config.exploration.at(state.step);
    let seeds: Vec<u64> = items.iter().map(|_| rng.random()).collect();
    let policy = &state.policy;
    let results: Vec<ItemResult> = items
        .par_iter()
        .zip(seeds)
        .map(|(item, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rollout = policy.sample_trajectory(&item.roots, item.condition.as_ref(), &mut rng, &exploration);
            let rewards = reward_trace(&rollout.trajectory, item.reward);
            let (loss, grad) = subtb_loss(policy, &rollout.trajectory, &rewards, item.condition.as_ref())
                .expect("trace aligned by construction");
            ItemResult {
                loss,
                grad,
                terminal_log_reward: *rewards.last().expect("non-empty"),
                tree_size: rollout.terminal().size(),
            }
        })
        .collect();

    let n = results.len().max(1) as f64;
    let mut grad = state.policy.zero_grad();
    let mut loss = 0.0;
    let mut mean_log_reward = 0.0;
    let mut mean_size = 0.0;
    for r in &results {
        grad.add_scaled(&r.grad, 1.0 / n);
        loss += r.loss / n;
        mean_log_reward += r.terminal_log_reward / n;
        mean_size += r.tree_size as f64 / n;
    }
    let lr = config.optimizer.lr_at(state.step, config.total_steps);
    state
        .optimizer
        .descend(&mut state.policy.params.data, &grad.data, lr);
    let ema = match state.ema {
        Some(e) => config.ema_beta * e + (1.0 - config.ema_beta) * loss,
        None => loss,
    };
    state.ema = Some(ema);
    state.step += 1;
    EStepStats {
        step: state.step,
        batch_loss: loss,
        ema,
        mean_log_reward,
        trees_sampled: results.len(),
        mean_tree_size: mean_size,
    }
}

/// Samples a rollout and its reward trace without updating anything.
pub fn sample_with_rewards<R: Rng + ?Sized>(
    policy: &LinearPolicy,
    item: &EStepItem<'_>,
    exploration: &Exploration,
    rng: &mut R,
) -> (Rollout, Vec<f64>) {
    let rollout = policy.sample_trajectory(&item.roots, item.condition.as_ref(), rng, exploration);
    let rewards = reward_trace(&rollout.trajectory, item.reward);
    (rollout, rewards)
}
