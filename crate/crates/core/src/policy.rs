//! Autoregressive predicate policies over logic trees.
//!
//! A policy emits, for every frontier path, a sequence of distinct child
//! predicates followed by the stop token. The token vocabulary is the
//! predicate space plus one stop token at index `N`. Sibling sets are
//! unordered, so the probability of a node's child set sums over every
//! emission order; this is computed exactly by a dynamic program over
//! subsets of the chosen children.
//!
//! [`LinearPolicy`] is a linear-softmax head over a sparse context feature
//! map with closed-form gradients. It plays both roles: the conditional
//! sampler `q_θ(R | X, Y)` and the unconditional prior `p_φ(R)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EventSequence, PredicateId, Vocabulary};
use crate::tlpp::log_sum_exp;
use crate::tree::{LevelChoice, LogicTree, Trajectory, TreeError, TreeLimits};

/// Largest supported tree width; the subset program is `O(2^W)` per node.
pub const MAX_WIDTH: usize = 12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("remote policy: {0}")]
    Remote(String),
}

/// Summary of `(X, Y)` fed to the conditional policy: per-type event
/// counts divided by the sequence length, then a one-hot of `Y` over the
/// targets (all zeros for the neutral, label-free slot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition(pub Vec<f64>);

impl Condition {
    pub fn new(seq: &EventSequence, vocab: &Vocabulary, label: Option<PredicateId>) -> Self {
        let n = vocab.len();
        let mut v = vec![0.0; n + vocab.targets().len()];
        if !seq.events.is_empty() {
            let inv = 1.0 / seq.events.len() as f64;
            for e in &seq.events {
                v[e.type_id] += inv;
            }
        }
        if let Some(y) = label {
            let yi = vocab.target_index(y).expect("label must be a target");
            v[n + yi] = 1.0;
        }
        Self(v)
    }
}

/// Everything a policy sees when emitting one token.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    /// Predicate at the end of the path being extended.
    pub parent: PredicateId,
    /// Depth of `parent` (root = 0).
    pub depth: usize,
    /// Children already emitted for this path at this level.
    pub chosen_siblings: &'a [PredicateId],
    pub condition: Option<&'a Condition>,
}

/// Log-probabilities over `Z ∪ {stop}`; masked tokens hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub logp: Vec<f64>,
}

impl TokenDistribution {
    pub fn stop_index(&self) -> usize {
        self.logp.len() - 1
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.logp[token].exp()
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.logp[token] == f64::NEG_INFINITY
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }
}

/// Mask of tokens a context may emit. Stop is always allowed; at the depth
/// limit or with a full sibling budget it is the only option.
pub fn allowed_tokens(ctx: &PolicyContext<'_>, n_predicates: usize, limits: &TreeLimits) -> Vec<bool> {
    let mut allowed = vec![false; n_predicates + 1];
    allowed[n_predicates] = true;
    if ctx.depth >= limits.max_depth || ctx.chosen_siblings.len() >= limits.max_width {
        return allowed;
    }
    for (p, a) in allowed.iter_mut().enumerate().take(n_predicates) {
        *a = (limits.allow_self_loops || p != ctx.parent) && !ctx.chosen_siblings.contains(&p);
    }
    allowed
}

/// Masked log-softmax of `logits`.
pub fn masked_log_softmax(logits: &[f64], allowed: &[bool]) -> TokenDistribution {
    let kept: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l)
        .collect();
    let lse = log_sum_exp(&kept);
    TokenDistribution {
        logp: logits
            .iter()
            .zip(allowed)
            .map(|(&l, &a)| if a { l - lse } else { f64::NEG_INFINITY })
            .collect(),
    }
}

/// Anything that can score the next token of a path.
pub trait TokenPolicy {
    fn n_predicates(&self) -> usize;
    fn limits(&self) -> &TreeLimits;
    fn token_dist(&self, ctx: &PolicyContext<'_>) -> Result<TokenDistribution, PolicyError>;
}

// ---------------------------------------------------------------------------
// Feature map and parameters

/// Sparse context features: one-hot parent, one-hot depth, chosen-sibling
/// bits and (conditional policies only) the `(X, Y)` summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_predicates: usize,
    pub max_depth: usize,
    pub n_targets: usize,
    pub conditioned: bool,
}

impl FeatureMap {
    fn depth_offset(&self) -> usize {
        self.n_predicates
    }

    fn sibling_offset(&self) -> usize {
        self.depth_offset() + self.max_depth + 1
    }

    fn condition_offset(&self) -> usize {
        self.sibling_offset() + self.n_predicates
    }

    /// Number of rows shared with the unconditional layout.
    pub fn shared_dim(&self) -> usize {
        self.condition_offset()
    }

    pub fn dim(&self) -> usize {
        let cond = if self.conditioned {
            self.n_predicates + self.n_targets
        } else {
            0
        };
        self.condition_offset() + cond
    }

    pub fn features(&self, ctx: &PolicyContext<'_>) -> Vec<(usize, f64)> {
        let mut f = Vec::with_capacity(2 + ctx.chosen_siblings.len());
        f.push((ctx.parent, 1.0));
        f.push((self.depth_offset() + ctx.depth.min(self.max_depth), 1.0));
        for &s in ctx.chosen_siblings {
            f.push((self.sibling_offset() + s, 1.0));
        }
        if self.conditioned {
            if let Some(c) = ctx.condition {
                debug_assert_eq!(c.0.len(), self.n_predicates + self.n_targets);
                let off = self.condition_offset();
                f.extend(
                    c.0.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(i, &v)| (off + i, v)),
                );
            }
        }
        f
    }
}

/// Dense `(feature_dim, N + 1)` matrix, row-major. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self[r, :] += scale * coef` for every `(r, x)` in `feats`, times `x`.
    pub fn add_outer(&mut self, feats: &[(usize, f64)], coef: &[f64], scale: f64) {
        for &(r, x) in feats {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (dst, &c) in row.iter_mut().zip(coef) {
                *dst += scale * x * c;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Sampling knobs

/// Off-policy perturbations used only while sampling. Log-probabilities
/// recorded for sampled choices are always those of the plain policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    /// Probability mass mixed in from the uniform distribution over
    /// unmasked tokens.
    pub epsilon: f64,
    /// Logits are divided by this before sampling.
    pub temperature: f64,
    /// Restricts sampling to the `k` most likely unmasked tokens.
    pub top_k: Option<usize>,
}

impl Default for Exploration {
    fn default() -> Self {
        Self::ON_POLICY
    }
}

impl Exploration {
    pub const ON_POLICY: Exploration = Exploration {
        epsilon: 0.0,
        temperature: 1.0,
        top_k: None,
    };

    pub fn epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::ON_POLICY
        }
    }

    /// Sampling probabilities derived from `dist`.
    pub fn sampling_probs(&self, dist: &TokenDistribution) -> Vec<f64> {
        let allowed: Vec<bool> = dist.logp.iter().map(|l| *l > f64::NEG_INFINITY).collect();
        let mut logits: Vec<f64> = dist
            .logp
            .iter()
            .map(|&l| if l > f64::NEG_INFINITY { l / self.temperature } else { l })
            .collect();
        if let Some(k) = self.top_k {
            let mut order: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            for &i in order.iter().skip(k.max(1)) {
                logits[i] = f64::NEG_INFINITY;
            }
        }
        let lse = log_sum_exp(&logits);
        let n_allowed = allowed.iter().filter(|&&a| a).count() as f64;
        logits
            .iter()
            .zip(&allowed)
            .map(|(&l, &a)| {
                let p = if l > f64::NEG_INFINITY { (l - lse).exp() } else { 0.0 };
                let u = if a { 1.0 / n_allowed } else { 0.0 };
                (1.0 - self.epsilon) * p + self.epsilon * u
            })
            .collect()
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

// ---------------------------------------------------------------------------
// Unordered child sets

/// Contexts visited by the subset program: for a node with children `S`
/// (sorted), entry `mask` is the sibling set `{S_i : bit i of mask}`.
fn subset_siblings(children: &[PredicateId]) -> Vec<Vec<PredicateId>> {
    let k = children.len();
    (0..1usize << k)
        .map(|mask| (0..k).filter(|i| mask >> i & 1 == 1).map(|i| children[i]).collect())
        .collect()
}

/// Log-probability that a node emits exactly the set `children` and then
/// stops, marginalized over emission orders. `dists[mask]` is the token
/// distribution after emitting the subset `mask`.
fn set_logprob(children: &[PredicateId], dists: &[TokenDistribution]) -> f64 {
    let k = children.len();
    let full = (1usize << k) - 1;
    let stop = dists[0].stop_index();
    let mut f = vec![f64::NEG_INFINITY; 1 << k];
    f[0] = 0.0;
    for mask in 1..=full {
        let terms: Vec<f64> = (0..k)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| f[mask ^ (1 << i)] + dists[mask ^ (1 << i)].logp[children[i]])
            .collect();
        f[mask] = log_sum_exp(&terms);
    }
    f[full] + dists[full].logp[stop]
}

/// Per-context coefficient vectors of `∇ log P(set)`: the gradient equals
/// `Σ_mask features(mask) ⊗ coef[mask]`.
fn set_logprob_coefficients(children: &[PredicateId], dists: &[TokenDistribution]) -> (f64, Vec<Vec<f64>>) {
    let k = children.len();
    let full = (1usize << k) - 1;
    let stop = dists[0].stop_index();
    let n_tokens = stop + 1;

    let mut f = vec![f64::NEG_INFINITY; 1 << k];
    f[0] = 0.0;
    for mask in 1..=full {
        let terms: Vec<f64> = (0..k)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| f[mask ^ (1 << i)] + dists[mask ^ (1 << i)].logp[children[i]])
            .collect();
        f[mask] = log_sum_exp(&terms);
    }
    // g[mask]: log-probability of finishing from `mask`, including the stop.
    let mut g = vec![f64::NEG_INFINITY; 1 << k];
    g[full] = dists[full].logp[stop];
    for mask in (0..full).rev() {
        let terms: Vec<f64> = (0..k)
            .filter(|i| mask >> i & 1 == 0)
            .map(|i| dists[mask].logp[children[i]] + g[mask | (1 << i)])
            .collect();
        g[mask] = log_sum_exp(&terms);
    }
    let total = g[0];
    let mut coef = vec![vec![0.0; n_tokens]; 1 << k];
    if !total.is_finite() {
        return (total, coef);
    }
    for mask in 0..=full {
        let probs = dists[mask].probs();
        let mut flow = 0.0;
        let c = &mut coef[mask];
        for i in (0..k).filter(|i| mask >> i & 1 == 0) {
            let w = (f[mask] + dists[mask].logp[children[i]] + g[mask | (1 << i)] - total).exp();
            c[children[i]] += w;
            flow += w;
        }
        if mask == full {
            c[stop] += 1.0;
            flow += 1.0;
        }
        for (cj, pj) in c.iter_mut().zip(&probs) {
            *cj -= flow * pj;
        }
    }
    (total, coef)
}

/// Checks that a tree could have been produced under `limits`.
pub fn check_tree(tree: &LogicTree, n_predicates: usize, limits: &TreeLimits) -> Result<(), TreeError> {
    for (pred, depth, kids) in tree.nodes() {
        if kids.is_empty() {
            continue;
        }
        if depth >= limits.max_depth {
            return Err(TreeError::DepthExceeded(limits.max_depth));
        }
        if kids.len() > limits.max_width.min(MAX_WIDTH) {
            return Err(TreeError::TooManyChildren {
                count: kids.len(),
                width: limits.max_width,
            });
        }
        if let Some(&bad) = kids.iter().find(|&&k| k >= n_predicates) {
            return Err(TreeError::InconsistentTrajectory(format!("predicate {bad} out of range")));
        }
        if !limits.allow_self_loops && kids.contains(&pred) {
            return Err(TreeError::SelfLoop(pred));
        }
    }
    Ok(())
}

/// `log p(R)` for any [`TokenPolicy`]: the sum over decided nodes of their
/// child-set log-probabilities. For a terminal tree this is the
/// probability of its unique trajectory including the final stop; for a
/// prefix state it is the probability of reaching that state.
pub fn tree_logprob_with<P: TokenPolicy + ?Sized>(
    policy: &P,
    tree: &LogicTree,
    condition: Option<&Condition>,
) -> Result<f64, PolicyError> {
    check_tree(tree, policy.n_predicates(), policy.limits())?;
    let mut total = 0.0;
    for (pred, depth, kids) in tree.decided_nodes() {
        let dists = subset_siblings(&kids)
            .iter()
            .map(|sib| {
                policy.token_dist(&PolicyContext {
                    parent: pred,
                    depth,
                    chosen_siblings: sib,
                    condition,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        total += set_logprob(&kids, &dists);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Linear policy

/// Linear-softmax policy with analytic gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub map: FeatureMap,
    pub limits: TreeLimits,
    pub params: PolicyParams,
}

/// A sampled trajectory with its per-step log-probabilities under the
/// unperturbed policy.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// `log q(R_k | R_{k-1})` for `k = 1..=t`.
    pub log_forward: Vec<f64>,
    /// `log q(stop | R_i)` for `i = 0..=t`.
    pub log_stop: Vec<f64>,
}

impl Rollout {
    pub fn terminal(&self) -> LogicTree {
        self.trajectory.terminal()
    }

    /// Log-probability of the terminal tree under the sampling policy.
    pub fn log_prob(&self) -> f64 {
        self.log_forward.iter().sum::<f64>() + self.log_stop.last().copied().unwrap_or(0.0)
    }
}

impl LinearPolicy {
    pub fn new(vocab: &Vocabulary, limits: TreeLimits, conditioned: bool) -> Self {
        assert!(limits.max_width <= MAX_WIDTH, "width above {MAX_WIDTH} is unsupported");
        let map = FeatureMap {
            n_predicates: vocab.len(),
            max_depth: limits.max_depth,
            n_targets: vocab.targets().len(),
            conditioned,
        };
        let params = PolicyParams::zeros(map.dim(), vocab.len() + 1);
        Self { map, limits, params }
    }

    /// A conditional policy whose shared rows start from `prior`'s values
    /// and whose condition rows start at zero.
    pub fn conditioned_from(prior: &LinearPolicy) -> Self {
        let map = FeatureMap {
            conditioned: true,
            ..prior.map
        };
        let mut params = PolicyParams::zeros(map.dim(), prior.params.cols);
        let shared = prior.map.shared_dim() * prior.params.cols;
        params.data[..shared].copy_from_slice(&prior.params.data[..shared]);
        Self {
            map,
            limits: prior.limits,
            params,
        }
    }

    /// Fills parameters with `N(0, scale²)` draws.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let normal = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        for v in &mut self.params.data {
            *v = rand_distr::Distribution::sample(&normal, rng);
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.map.n_predicates + 1
    }

    pub fn stop_token(&self) -> usize {
        self.map.n_predicates
    }

    pub fn zero_grad(&self) -> PolicyParams {
        PolicyParams::zeros(self.params.rows, self.params.cols)
    }

    fn logits(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let mut logits = vec![0.0; self.params.cols];
        for &(r, x) in feats {
            for (l, &w) in logits.iter_mut().zip(self.params.row(r)) {
                *l += x * w;
            }
        }
        logits
    }

    /// Masked log-softmax of `features(ctx) · params`.
    pub fn next_token_dist(&self, ctx: &PolicyContext<'_>) -> TokenDistribution {
        let feats = self.map.features(ctx);
        let allowed = allowed_tokens(ctx, self.map.n_predicates, &self.limits);
        masked_log_softmax(&self.logits(&feats), &allowed)
    }

    fn subset_dists(
        &self,
        parent: PredicateId,
        depth: usize,
        children: &[PredicateId],
        condition: Option<&Condition>,
    ) -> (Vec<Vec<PredicateId>>, Vec<TokenDistribution>) {
        let sibs = subset_siblings(children);
        let dists = sibs
            .iter()
            .map(|s| {
                self.next_token_dist(&PolicyContext {
                    parent,
                    depth,
                    chosen_siblings: s,
                    condition,
                })
            })
            .collect();
        (sibs, dists)
    }

    /// Log-probability that the path ending at `parent` emits the child set
    /// `children` (any order) and stops.
    pub fn node_logprob(
        &self,
        parent: PredicateId,
        depth: usize,
        children: &[PredicateId],
        condition: Option<&Condition>,
    ) -> f64 {
        let mut sorted = children.to_vec();
        sorted.sort_unstable();
        let (_, dists) = self.subset_dists(parent, depth, &sorted, condition);
        set_logprob(&sorted, &dists)
    }

    /// Adds `scale * ∇ node_logprob` into `grad`; returns the log-probability.
    pub fn accumulate_node_grad(
        &self,
        parent: PredicateId,
        depth: usize,
        children: &[PredicateId],
        condition: Option<&Condition>,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> f64 {
        let mut sorted = children.to_vec();
        sorted.sort_unstable();
        let (sibs, dists) = self.subset_dists(parent, depth, &sorted, condition);
        let (total, coef) = set_logprob_coefficients(&sorted, &dists);
        if scale != 0.0 && total.is_finite() {
            for (sib, c) in sibs.iter().zip(&coef) {
                let feats = self.map.features(&PolicyContext {
                    parent,
                    depth,
                    chosen_siblings: sib,
                    condition,
                });
                grad.add_outer(&feats, c, scale);
            }
        }
        total
    }

    /// `log q(R_{k} | R_{k-1})` for one level choice.
    pub fn level_logprob(&self, state: &LogicTree, choice: &LevelChoice, condition: Option<&Condition>) -> f64 {
        state
            .frontier()
            .iter()
            .zip(&choice.children)
            .map(|(&(pred, depth), kids)| self.node_logprob(pred, depth, kids, condition))
            .sum()
    }

    pub fn accumulate_level_grad(
        &self,
        state: &LogicTree,
        choice: &LevelChoice,
        condition: Option<&Condition>,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> f64 {
        state
            .frontier()
            .iter()
            .zip(&choice.children)
            .map(|(&(pred, depth), kids)| self.accumulate_node_grad(pred, depth, kids, condition, scale, grad))
            .sum()
    }

    /// `log q(stop | R)`: every frontier path stops at once.
    pub fn stop_logprob(&self, state: &LogicTree, condition: Option<&Condition>) -> f64 {
        state
            .frontier()
            .iter()
            .map(|&(pred, depth)| self.node_logprob(pred, depth, &[], condition))
            .sum()
    }

    pub fn accumulate_stop_grad(
        &self,
        state: &LogicTree,
        condition: Option<&Condition>,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> f64 {
        state
            .frontier()
            .iter()
            .map(|&(pred, depth)| self.accumulate_node_grad(pred, depth, &[], condition, scale, grad))
            .sum()
    }

    /// `log p(R)`; see [`tree_logprob_with`].
    pub fn tree_logprob(&self, tree: &LogicTree, condition: Option<&Condition>) -> Result<f64, TreeError> {
        check_tree(tree, self.map.n_predicates, &self.limits)?;
        Ok(tree
            .decided_nodes()
            .into_iter()
            .map(|(pred, depth, kids)| self.node_logprob(pred, depth, &kids, condition))
            .sum())
    }

    /// Sum of the per-level log-probabilities of `trajectory`, plus the
    /// final stop. Equals `tree_logprob` of its terminal tree.
    pub fn trajectory_logprob(
        &self,
        trajectory: &Trajectory,
        condition: Option<&Condition>,
    ) -> Result<f64, TreeError> {
        trajectory.validate(&self.limits)?;
        let forward: f64 = trajectory
            .states
            .iter()
            .zip(&trajectory.choices)
            .map(|(s, c)| self.level_logprob(s, c, condition))
            .sum();
        let last = trajectory.states.last().expect("non-empty");
        Ok(forward + self.stop_logprob(last, condition))
    }

    /// `∇ log p(R)` with respect to the parameters.
    pub fn grad_logprob(&self, tree: &LogicTree, condition: Option<&Condition>) -> Result<PolicyParams, TreeError> {
        let mut grad = self.zero_grad();
        self.accumulate_tree_grad(tree, condition, 1.0, &mut grad)?;
        Ok(grad)
    }

    pub fn accumulate_tree_grad(
        &self,
        tree: &LogicTree,
        condition: Option<&Condition>,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> Result<f64, TreeError> {
        check_tree(tree, self.map.n_predicates, &self.limits)?;
        Ok(tree
            .decided_nodes()
            .into_iter()
            .map(|(pred, depth, kids)| self.accumulate_node_grad(pred, depth, &kids, condition, scale, grad))
            .sum())
    }

    /// Samples one level: for each frontier path, distinct children one at
    /// a time until stop. Returns the choice and its log-probability under
    /// the unperturbed policy.
    pub fn sample_level<R: Rng + ?Sized>(
        &self,
        state: &LogicTree,
        condition: Option<&Condition>,
        rng: &mut R,
        exploration: &Exploration,
    ) -> (LevelChoice, f64) {
        let stop = self.stop_token();
        let mut children = Vec::new();
        for (pred, depth) in state.frontier() {
            let mut chosen: Vec<PredicateId> = Vec::new();
            loop {
                let dist = self.next_token_dist(&PolicyContext {
                    parent: pred,
                    depth,
                    chosen_siblings: &chosen,
                    condition,
                });
                let token = draw(&exploration.sampling_probs(&dist), rng);
                if token == stop {
                    break;
                }
                chosen.push(token);
            }
            children.push(chosen);
        }
        let choice = LevelChoice::new(children);
        let lp = self.level_logprob(state, &choice, condition);
        (choice, lp)
    }

    /// Samples a full trajectory from the bare roots `roots`.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        roots: &[PredicateId],
        condition: Option<&Condition>,
        rng: &mut R,
        exploration: &Exploration,
    ) -> Rollout {
        let mut states = vec![LogicTree::forest(roots)];
        let mut choices = Vec::new();
        let mut log_forward = Vec::new();
        let mut log_stop = Vec::new();
        loop {
            let state = states.last().expect("non-empty");
            let (choice, lp) = self.sample_level(state, condition, rng, exploration);
            log_stop.push(self.stop_logprob(state, condition));
            if choice.is_stop() {
                break;
            }
            let next = state.expand(&choice, &self.limits).expect("policy respects limits");
            log_forward.push(lp);
            choices.push(choice);
            states.push(next);
        }
        Rollout {
            trajectory: Trajectory { states, choices },
            log_forward,
            log_stop,
        }
    }

    /// Samples a terminal tree (a forest when several roots are given).
    pub fn sample_tree<R: Rng + ?Sized>(
        &self,
        roots: &[PredicateId],
        condition: Option<&Condition>,
        rng: &mut R,
        exploration: &Exploration,
    ) -> LogicTree {
        self.sample_trajectory(roots, condition, rng, exploration).terminal()
    }
}

impl TokenPolicy for LinearPolicy {
    fn n_predicates(&self) -> usize {
        self.map.n_predicates
    }

    fn limits(&self) -> &TreeLimits {
        &self.limits
    }

    fn token_dist(&self, ctx: &PolicyContext<'_>) -> Result<TokenDistribution, PolicyError> {
        Ok(self.next_token_dist(ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{enumerate_terminal_trees, DEFAULT_ENUMERATION_CAP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab3() -> Vocabulary {
        Vocabulary::new(&["A", "B", "C"], &[0]).unwrap()
    }

    #[test]
    fn zero_params_uniform_over_unmasked() {
        let v = vocab3();
        let limits = TreeLimits {
            max_depth: 2,
            max_width: 2,
            allow_self_loops: true,
        };
        let p = LinearPolicy::new(&v, limits, false);
        let d = p.next_token_dist(&PolicyContext {
            parent: 0,
            depth: 0,
            chosen_siblings: &[],
            condition: None,
        });
        for i in 0..4 {
            assert!((d.prob(i) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_limit_forces_stop() {
        let p = LinearPolicy::new(&vocab3(), TreeLimits::new(2, 2), false);
        let d = p.next_token_dist(&PolicyContext {
            parent: 1,
            depth: 2,
            chosen_siblings: &[],
            condition: None,
        });
        assert_eq!(d.prob(3), 1.0);
        assert!((0..3).all(|i| d.is_masked(i)));
    }

    #[test]
    fn chosen_siblings_are_masked() {
        let p = LinearPolicy::new(&vocab3(), TreeLimits::new(2, 2), false);
        let d = p.next_token_dist(&PolicyContext {
            parent: 1,
            depth: 0,
            chosen_siblings: &[1],
            condition: None,
        });
        assert!(d.is_masked(1));
        for i in [0, 2, 3] {
            assert!((d.prob(i) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_logprob_examples() {
        let v = vocab3();
        let p = LinearPolicy::new(&v, TreeLimits::new(1, 1), false);
        let bare = LogicTree::new(0).terminated();
        assert!((p.tree_logprob(&bare, None).unwrap() - (1.0f64 / 3.0).ln()).abs() < 1e-12);

        // Choose B among {B, C, stop}; the budget is then full so the stop
        // is forced, and the new leaf sits at the depth limit.
        let ab = LogicTree::from_paths(0, &[crate::tree::RulePath(vec![0, 1])]);
        assert!((p.tree_logprob(&ab, None).unwrap() - (1.0f64 / 3.0).ln()).abs() < 1e-12);

        let p2 = LinearPolicy::new(&v, TreeLimits::new(1, 2), false);
        let expected = (1.0f64 / 3.0).ln() + 0.5f64.ln();
        assert!((p2.tree_logprob(&ab, None).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn terminal_probabilities_sum_to_one() {
        let v = Vocabulary::new(&["A", "B", "C", "D"], &[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LinearPolicy::new(&v, TreeLimits::new(2, 2), false);
        p.randomize(1.0, &mut rng);
        let trees = enumerate_terminal_trees(4, 0, &p.limits, DEFAULT_ENUMERATION_CAP).unwrap();
        let total: f64 = trees.iter().map(|t| p.tree_logprob(t, None).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn set_probability_sums_orders() {
        let v = vocab3();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LinearPolicy::new(&v, TreeLimits::new(1, 2), false);
        p.randomize(1.0, &mut rng);
        let ctx = |sib: &'static [usize]| PolicyContext {
            parent: 0,
            depth: 0,
            chosen_siblings: sib,
            condition: None,
        };
        let d0 = p.next_token_dist(&ctx(&[]));
        let db = p.next_token_dist(&ctx(&[1]));
        let dc = p.next_token_dist(&ctx(&[2]));
        let dbc = p.next_token_dist(&ctx(&[1, 2]));
        let by_hand = (d0.prob(1) * db.prob(2) + d0.prob(2) * dc.prob(1)) * dbc.prob(3);
        assert!((p.node_logprob(0, 0, &[2, 1], None) - by_hand.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_logprob_replays() {
        let v = Vocabulary::new(&["A", "B", "C", "D"], &[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LinearPolicy::new(&v, TreeLimits::new(2, 2), false);
        p.randomize(0.5, &mut rng);
        for _ in 0..50 {
            let r = p.sample_trajectory(&[0], None, &mut rng, &Exploration::epsilon(0.3));
            let replay = p.trajectory_logprob(&r.trajectory, None).unwrap();
            assert!((replay - r.log_prob()).abs() < 1e-12);
            let direct = p.tree_logprob(&r.terminal(), None).unwrap();
            assert!((direct - replay).abs() < 1e-12);
            for (i, s) in r.trajectory.states.iter().enumerate() {
                let prefix: f64 = r.log_forward[..i].iter().sum();
                assert!((p.tree_logprob(s, None).unwrap() - prefix).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_truncates() {
        let e = Exploration {
            epsilon: 0.0,
            temperature: 1.0,
            top_k: Some(1),
        };
        let d = TokenDistribution {
            logp: vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()],
        };
        assert_eq!(e.sampling_probs(&d), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn conditioned_copy_shares_rows() {
        let v = vocab3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prior = LinearPolicy::new(&v, TreeLimits::new(2, 2), false);
        prior.randomize(1.0, &mut rng);
        let post = LinearPolicy::conditioned_from(&prior);
        let seq = EventSequence::new(vec![crate::data::Event::new(0.1, 1)], 1.0, 0);
        let cond = Condition::new(&seq, &v, Some(0));
        let ctx = PolicyContext {
            parent: 0,
            depth: 1,
            chosen_siblings: &[2],
            condition: Some(&cond),
        };
        assert_eq!(prior.next_token_dist(&ctx), post.next_token_dist(&ctx));
    }
}
