//! Logic trees grown level by level from target roots.
//!
//! A tree may carry several roots (one per target), in which case it is a
//! forest explaining every target at once; all roots grow in lock step.
//!
//! A tree is a value: children are kept sorted by predicate id, so derived
//! equality is equality up to sibling order. Leaves are either on the
//! frontier (still growable) or terminated. All frontier leaves sit on the
//! same level because growth is level-wise.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PredicateId, Vocabulary};

/// Default cap on the number of trees [`enumerate_terminal_trees`] will build.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("tree is terminal and cannot be expanded")]
    Terminal,
    #[error("choice addresses {got} frontier paths, tree has {expected}")]
    FrontierMismatch { expected: usize, got: usize },
    #[error("{count} children exceed the width limit {width}")]
    TooManyChildren { count: usize, width: usize },
    #[error("duplicate sibling {0}")]
    DuplicateSibling(PredicateId),
    #[error("expansion past depth limit {0}")]
    DepthExceeded(usize),
    #[error("predicate {0} may not be its own child")]
    SelfLoop(PredicateId),
    #[error("search space holds {count} trees, above the cap {cap}")]
    SpaceTooLarge { count: u128, cap: u64 },
    #[error("trajectory is inconsistent: {0}")]
    InconsistentTrajectory(String),
}

/// Depth/width budget and the self-loop rule shared by trees, enumeration
/// and policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLimits {
    pub max_depth: usize,
    pub max_width: usize,
    /// When false a node may not have a child with its own predicate.
    #[serde(default)]
    pub allow_self_loops: bool,
}

impl TreeLimits {
    pub fn new(max_depth: usize, max_width: usize) -> Self {
        Self {
            max_depth,
            max_width,
            allow_self_loops: false,
        }
    }

    /// Predicates that may appear as a child of `parent`.
    pub fn candidates(&self, n_predicates: usize, parent: PredicateId) -> Vec<PredicateId> {
        (0..n_predicates)
            .filter(|&p| self.allow_self_loops || p != parent)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub pred: PredicateId,
    pub children: Vec<Node>,
    /// Meaningful for leaves only: a terminated leaf never grows again.
    pub terminated: bool,
}

impl Node {
    fn frontier_leaf(pred: PredicateId) -> Self {
        Self {
            pred,
            children: Vec::new(),
            terminated: false,
        }
    }

    fn is_frontier(&self) -> bool {
        self.children.is_empty() && !self.terminated
    }

    fn size(&self) -> usize {
        1 + self.children.iter().map(Node::size).sum::<usize>()
    }

    fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }
}

/// A root-to-node path `z_0 ← z_1 ← … ← z_j`; `z_0` is the head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RulePath(pub Vec<PredicateId>);

impl RulePath {
    pub fn new(preds: Vec<PredicateId>) -> Self {
        assert!(!preds.is_empty(), "a rule path needs a head");
        Self(preds)
    }

    pub fn head(&self) -> PredicateId {
        self.0[0]
    }

    /// Body predicates from the head's child down to the deepest node.
    pub fn body(&self) -> &[PredicateId] {
        &self.0[1..]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable textual key, e.g. `0<-1<-2`.
    pub fn key(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        parts.join("<-")
    }

    pub fn display(&self, vocab: &Vocabulary) -> String {
        let parts: Vec<&str> = self.0.iter().map(|&p| vocab.name(p)).collect();
        parts.join(" <- ")
    }
}

impl fmt::Display for RulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Children chosen for each frontier path at one level, in frontier order.
/// Each entry lists the predicates emitted before the stop symbol; an empty
/// entry terminates that path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelChoice {
    pub children: Vec<Vec<PredicateId>>,
}

impl LevelChoice {
    pub fn new(children: Vec<Vec<PredicateId>>) -> Self {
        Self { children }
    }

    /// Every path stops: the termination action.
    pub fn is_stop(&self) -> bool {
        self.children.iter().all(Vec::is_empty)
    }

    pub fn n_new_paths(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LogicTree {
    roots: Vec<Node>,
}

impl LogicTree {
    /// The initial state `{z_0}` with the root on the frontier.
    pub fn new(root: PredicateId) -> Self {
        Self::forest(&[root])
    }

    /// The initial state with every listed root on the frontier. Roots are
    /// sorted and deduplicated.
    pub fn forest(roots: &[PredicateId]) -> Self {
        let mut ids = roots.to_vec();
        ids.sort_unstable();
        ids.dedup();
        assert!(!ids.is_empty(), "a tree needs at least one root");
        Self {
            roots: ids.into_iter().map(Node::frontier_leaf).collect(),
        }
    }

    pub fn from_root_node(root: Node) -> Self {
        Self::from_root_nodes(vec![root])
    }

    pub fn from_root_nodes(mut roots: Vec<Node>) -> Self {
        assert!(!roots.is_empty(), "a tree needs at least one root");
        roots.iter_mut().for_each(normalize);
        roots.sort_by_key(|r| r.pred);
        Self { roots }
    }

    /// Terminal forest over `roots` holding exactly `paths`; each path goes
    /// under the root equal to its head.
    pub fn from_forest_paths(roots: &[PredicateId], paths: &[RulePath]) -> Self {
        let mut ids = roots.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let nodes = ids
            .iter()
            .map(|&r| {
                let mine: Vec<RulePath> = paths.iter().filter(|p| p.head() == r).cloned().collect();
                LogicTree::from_paths(r, &mine).roots.remove(0)
            })
            .collect();
        Self::from_root_nodes(nodes)
    }

    /// Builds the terminal tree containing exactly `paths` (all sharing the
    /// head `root`). Every leaf is terminated.
    pub fn from_paths(root: PredicateId, paths: &[RulePath]) -> Self {
        let mut node = Node {
            pred: root,
            children: Vec::new(),
            terminated: true,
        };
        for path in paths {
            assert_eq!(path.head(), root, "path head must match the root");
            let mut cur = &mut node;
            for &p in path.body() {
                let idx = match cur.children.iter().position(|c| c.pred == p) {
                    Some(i) => i,
                    None => {
                        cur.children.push(Node {
                            pred: p,
                            children: Vec::new(),
                            terminated: true,
                        });
                        cur.children.len() - 1
                    }
                };
                cur = &mut cur.children[idx];
            }
        }
        Self::from_root_node(node)
    }

    /// The first (smallest) root.
    pub fn root(&self) -> PredicateId {
        self.roots[0].pred
    }

    pub fn roots(&self) -> Vec<PredicateId> {
        self.roots.iter().map(|r| r.pred).collect()
    }

    pub fn root_node(&self) -> &Node {
        &self.roots[0]
    }

    pub fn root_nodes(&self) -> &[Node] {
        &self.roots
    }

    pub fn depth(&self) -> usize {
        self.roots.iter().map(Node::depth).max().unwrap_or(0)
    }

    pub fn size(&self) -> usize {
        self.roots.iter().map(Node::size).sum()
    }

    pub fn is_terminal(&self) -> bool {
        self.frontier_len() == 0
    }

    pub fn frontier_len(&self) -> usize {
        fn go(n: &Node) -> usize {
            if n.is_frontier() {
                1
            } else {
                n.children.iter().map(go).sum()
            }
        }
        self.roots.iter().map(go).sum()
    }

    /// Frontier leaves as `(predicate, depth)` in depth-first order.
    pub fn frontier(&self) -> Vec<(PredicateId, usize)> {
        fn go(n: &Node, depth: usize, out: &mut Vec<(PredicateId, usize)>) {
            if n.is_frontier() {
                out.push((n.pred, depth));
            }
            for c in &n.children {
                go(c, depth + 1, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            go(r, 0, &mut out);
        }
        out
    }

    /// Every node as `(predicate, depth, sorted child predicates)` in
    /// depth-first order, frontier leaves included.
    pub fn nodes(&self) -> Vec<(PredicateId, usize, Vec<PredicateId>)> {
        fn go(n: &Node, depth: usize, out: &mut Vec<(PredicateId, usize, Vec<PredicateId>)>) {
            out.push((n.pred, depth, n.children.iter().map(|c| c.pred).collect()));
            for c in &n.children {
                go(c, depth + 1, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            go(r, 0, &mut out);
        }
        out
    }

    /// Like [`nodes`](Self::nodes) but without frontier leaves, whose child
    /// sets are still undecided.
    pub fn decided_nodes(&self) -> Vec<(PredicateId, usize, Vec<PredicateId>)> {
        fn go(n: &Node, depth: usize, out: &mut Vec<(PredicateId, usize, Vec<PredicateId>)>) {
            if !n.is_frontier() {
                out.push((n.pred, depth, n.children.iter().map(|c| c.pred).collect()));
            }
            for c in &n.children {
                go(c, depth + 1, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            go(r, 0, &mut out);
        }
        out
    }

    /// Grows every frontier path by one level according to `choice`.
    pub fn expand(&self, choice: &LevelChoice, limits: &TreeLimits) -> Result<LogicTree, TreeError> {
        let frontier = self.frontier_len();
        if frontier == 0 {
            return Err(TreeError::Terminal);
        }
        if choice.children.len() != frontier {
            return Err(TreeError::FrontierMismatch {
                expected: frontier,
                got: choice.children.len(),
            });
        }
        fn go(
            n: &mut Node,
            depth: usize,
            choices: &mut std::slice::Iter<'_, Vec<PredicateId>>,
            limits: &TreeLimits,
        ) -> Result<(), TreeError> {
            if n.is_frontier() {
                let kids = choices.next().expect("frontier length checked");
                if kids.is_empty() {
                    n.terminated = true;
                    return Ok(());
                }
                if depth >= limits.max_depth {
                    return Err(TreeError::DepthExceeded(limits.max_depth));
                }
                if kids.len() > limits.max_width {
                    return Err(TreeError::TooManyChildren {
                        count: kids.len(),
                        width: limits.max_width,
                    });
                }
                let mut sorted = kids.clone();
                sorted.sort_unstable();
                if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                    return Err(TreeError::DuplicateSibling(w[0]));
                }
                if !limits.allow_self_loops && sorted.contains(&n.pred) {
                    return Err(TreeError::SelfLoop(n.pred));
                }
                n.children = sorted.into_iter().map(Node::frontier_leaf).collect();
                return Ok(());
            }
            for c in &mut n.children {
                go(c, depth + 1, choices, limits)?;
            }
            Ok(())
        }
        let mut out = self.clone();
        let mut it = choice.children.iter();
        for r in &mut out.roots {
            go(r, 0, &mut it, limits)?;
        }
        Ok(out)
    }

    /// The same tree with every frontier leaf terminated (`R^T`).
    pub fn terminated(&self) -> LogicTree {
        fn go(n: &mut Node) {
            if n.children.is_empty() {
                n.terminated = true;
            }
            n.children.iter_mut().for_each(go);
        }
        let mut out = self.clone();
        out.roots.iter_mut().for_each(go);
        out
    }

    /// Root-to-node paths with at least one body predicate, depth-first.
    pub fn paths(&self) -> Vec<RulePath> {
        fn go(n: &Node, prefix: &mut Vec<PredicateId>, out: &mut Vec<RulePath>) {
            prefix.push(n.pred);
            if prefix.len() >= 2 {
                out.push(RulePath(prefix.clone()));
            }
            for c in &n.children {
                go(c, prefix, out);
            }
            prefix.pop();
        }
        let mut out = Vec::new();
        for r in &self.roots {
            go(r, &mut Vec::new(), &mut out);
        }
        out
    }

    /// Key that identifies the state up to sibling order. Frontier leaves
    /// carry a `*`; a terminal `{A}` is just `A`'s id. Roots of a forest
    /// are separated by `;`.
    pub fn canonical_key(&self) -> String {
        fn go(n: &Node, out: &mut String) {
            let _ = write!(out, "{}", n.pred);
            if n.is_frontier() {
                out.push('*');
            }
            if !n.children.is_empty() {
                out.push('(');
                for (i, c) in n.children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    go(c, out);
                }
                out.push(')');
            }
        }
        let mut out = String::new();
        for (i, r) in self.roots.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            go(r, &mut out);
        }
        out
    }

    /// Like [`LogicTree::canonical_key`] with predicate names.
    pub fn display(&self, vocab: &Vocabulary) -> String {
        fn go(n: &Node, vocab: &Vocabulary, out: &mut String) {
            out.push_str(vocab.name(n.pred));
            if n.is_frontier() {
                out.push('*');
            }
            if !n.children.is_empty() {
                out.push('(');
                for (i, c) in n.children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    go(c, vocab, out);
                }
                out.push(')');
            }
        }
        let mut out = String::new();
        for (i, r) in self.roots.iter().enumerate() {
            if i > 0 {
                out.push_str("; ");
            }
            go(r, vocab, &mut out);
        }
        out
    }

    /// Rebuilds the unique level-wise trajectory that ends in this tree.
    ///
    /// The last state is the tree with its deepest leaves back on the
    /// frontier; terminating it yields `self.terminated()`.
    pub fn trajectory(&self, limits: &TreeLimits) -> Result<Trajectory, TreeError> {
        let target = self.terminated();
        let mut states = vec![LogicTree::forest(&self.roots())];
        let mut choices = Vec::new();
        loop {
            let state = states.last().expect("non-empty");
            let choice = LevelChoice::new(
                frontier_nodes(state)
                    .iter()
                    .map(|addr| {
                        node_at(&target.roots, addr)
                            .map(|n| n.children.iter().map(|c| c.pred).collect())
                            .ok_or_else(|| TreeError::InconsistentTrajectory("frontier outside target".into()))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            );
            if choice.is_stop() {
                break;
            }
            let next = state.expand(&choice, limits)?;
            choices.push(choice);
            states.push(next);
        }
        let traj = Trajectory { states, choices };
        if traj.terminal() != target {
            return Err(TreeError::InconsistentTrajectory("replay does not reach the tree".into()));
        }
        Ok(traj)
    }

    /// Path-set JSON mirroring the rule representation.
    pub fn to_json(&self, vocab: &Vocabulary) -> serde_json::Value {
        serde_json::json!({
            "roots": self.roots.iter().map(|r| vocab.name(r.pred)).collect::<Vec<_>>(),
            "paths": self
                .paths()
                .iter()
                .map(|p| p.0.iter().map(|&z| vocab.name(z)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }
}

impl fmt::Display for LogicTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_key())
    }
}

fn normalize(n: &mut Node) {
    n.children.sort_by_key(|c| c.pred);
    if !n.children.is_empty() {
        n.terminated = false;
    }
    n.children.iter_mut().for_each(normalize);
}

/// Addresses (root index, then child indices) of frontier leaves,
/// depth-first.
fn frontier_nodes(tree: &LogicTree) -> Vec<Vec<usize>> {
    fn go(n: &Node, addr: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n.is_frontier() {
            out.push(addr.clone());
        }
        for (i, c) in n.children.iter().enumerate() {
            addr.push(i);
            go(c, addr, out);
            addr.pop();
        }
    }
    let mut out = Vec::new();
    for (i, r) in tree.roots.iter().enumerate() {
        go(r, &mut vec![i], &mut out);
    }
    out
}

fn node_at<'a>(roots: &'a [Node], addr: &[usize]) -> Option<&'a Node> {
    let (first, rest) = addr.split_first()?;
    let mut cur = roots.get(*first)?;
    for &i in rest {
        cur = cur.children.get(i)?;
    }
    Some(cur)
}

/// The state path `R_0 → … → R_t` with the level choices between states.
/// Every stored state is non-terminal; the final all-stop action is
/// implicit and yields [`Trajectory::terminal`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<LogicTree>,
    pub choices: Vec<LevelChoice>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn terminal(&self) -> LogicTree {
        self.states.last().expect("trajectory has R_0").terminated()
    }

    /// Folds `expand` over the stored choices and checks every state.
    pub fn validate(&self, limits: &TreeLimits) -> Result<(), TreeError> {
        if self.states.len() != self.choices.len() + 1 {
            return Err(TreeError::InconsistentTrajectory(
                "state and choice counts disagree".into(),
            ));
        }
        let first = &self.states[0];
        if *first != LogicTree::forest(&first.roots()) {
            return Err(TreeError::InconsistentTrajectory("R_0 is not the bare root set".into()));
        }
        let mut cur = first.clone();
        for (choice, stored) in self.choices.iter().zip(&self.states[1..]) {
            if choice.is_stop() {
                return Err(TreeError::InconsistentTrajectory("stop inside trajectory".into()));
            }
            cur = cur.expand(choice, limits)?;
            if cur != *stored {
                return Err(TreeError::InconsistentTrajectory("replayed state differs".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Enumeration

/// The coarse `N^(W^d)` size estimate of the tree space.
pub fn search_space_bound(n_predicates: usize, limits: &TreeLimits) -> f64 {
    (n_predicates as f64).powf((limits.max_width as f64).powi(limits.max_depth as i32))
}

/// Exact number of terminal trees under `root`, via elementary symmetric
/// sums of the per-child subtree counts.
pub fn count_terminal_trees(n_predicates: usize, root: PredicateId, limits: &TreeLimits) -> u128 {
    fn count(
        pred: PredicateId,
        depth: usize,
        n: usize,
        limits: &TreeLimits,
        memo: &mut HashMap<(PredicateId, usize), u128>,
    ) -> u128 {
        if depth == limits.max_depth {
            return 1;
        }
        if let Some(&c) = memo.get(&(pred, depth)) {
            return c;
        }
        let child_counts: Vec<u128> = limits
            .candidates(n, pred)
            .into_iter()
            .map(|c| count(c, depth + 1, n, limits, memo))
            .collect();
        // e[k] = sum over k-subsets of the product of their counts.
        let mut e = vec![0u128; limits.max_width + 1];
        e[0] = 1;
        for &c in &child_counts {
            for k in (1..=limits.max_width).rev() {
                e[k] = e[k].saturating_add(e[k - 1].saturating_mul(c));
            }
        }
        let total = e.iter().fold(0u128, |a, &b| a.saturating_add(b));
        memo.insert((pred, depth), total);
        total
    }
    count(root, 0, n_predicates, limits, &mut HashMap::new())
}

/// Every distinct terminal tree rooted at `root`, each exactly once, in a
/// canonical order (smaller child sets first, then lexicographic).
pub fn enumerate_terminal_trees(
    n_predicates: usize,
    root: PredicateId,
    limits: &TreeLimits,
    cap: u64,
) -> Result<Vec<LogicTree>, TreeError> {
    let count = count_terminal_trees(n_predicates, root, limits);
    if count > cap as u128 {
        return Err(TreeError::SpaceTooLarge { count, cap });
    }
    let mut memo = HashMap::new();
    Ok(subtrees(root, 0, n_predicates, limits, &mut memo)
        .into_iter()
        .map(|root| LogicTree { roots: vec![root] })
        .collect())
}

/// Product of the per-root counts of [`count_terminal_trees`].
pub fn count_terminal_forests(n_predicates: usize, roots: &[PredicateId], limits: &TreeLimits) -> u128 {
    roots
        .iter()
        .fold(1u128, |acc, &r| acc.saturating_mul(count_terminal_trees(n_predicates, r, limits)))
}

/// Every terminal forest over `roots`: the Cartesian product of the
/// per-root enumerations. A single root gives [`enumerate_terminal_trees`].
pub fn enumerate_terminal_forests(
    n_predicates: usize,
    roots: &[PredicateId],
    limits: &TreeLimits,
    cap: u64,
) -> Result<Vec<LogicTree>, TreeError> {
    let mut ids = roots.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let count = count_terminal_forests(n_predicates, &ids, limits);
    if count > cap as u128 {
        return Err(TreeError::SpaceTooLarge { count, cap });
    }
    let per_root: Vec<Vec<Node>> = ids
        .iter()
        .map(|&r| {
            enumerate_terminal_trees(n_predicates, r, limits, cap)
                .map(|ts| ts.into_iter().map(|t| t.roots.into_iter().next().expect("one root")).collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(cartesian(&per_root)
        .into_iter()
        .map(|roots| LogicTree { roots })
        .collect())
}

fn subtrees(
    pred: PredicateId,
    depth: usize,
    n: usize,
    limits: &TreeLimits,
    memo: &mut HashMap<(PredicateId, usize), Vec<Node>>,
) -> Vec<Node> {
    if let Some(v) = memo.get(&(pred, depth)) {
        return v.clone();
    }
    let leaf = Node {
        pred,
        children: Vec::new(),
        terminated: true,
    };
    if depth == limits.max_depth {
        return vec![leaf];
    }
    let candidates = limits.candidates(n, pred);
    let mut out = Vec::new();
    for size in 0..=limits.max_width.min(candidates.len()) {
        for subset in combinations(&candidates, size) {
            let options: Vec<Vec<Node>> = subset
                .iter()
                .map(|&c| subtrees(c, depth + 1, n, limits, memo))
                .collect();
            for combo in cartesian(&options) {
                out.push(Node {
                    pred,
                    terminated: combo.is_empty(),
                    children: combo,
                });
            }
        }
    }
    memo.insert((pred, depth), out.clone());
    out
}

fn combinations(items: &[PredicateId], k: usize) -> Vec<Vec<PredicateId>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn cartesian(options: &[Vec<Node>]) -> Vec<Vec<Node>> {
    let mut acc: Vec<Vec<Node>> = vec![Vec::new()];
    for opts in options {
        let mut next = Vec::with_capacity(acc.len() * opts.len());
        for prefix in &acc {
            for o in opts {
                let mut v = prefix.clone();
                v.push(o.clone());
                next.push(v);
            }
        }
        acc = next;
    }
    acc
}

// ---------------------------------------------------------------------------
// Export

/// One aggregated rule for DOT export.
#[derive(Debug, Clone)]
pub struct PathStat {
    pub path: RulePath,
    /// Fraction of sampled trees containing this path.
    pub frequency: f64,
    pub weight: f64,
}

/// Renders aggregated paths as a DOT digraph. Each path prefix is a node;
/// edges point from body to head. `penwidth` scales with the posterior
/// frequency (also written verbatim as `freq`), black marks a non-negative
/// weight and red an inhibiting one.
pub fn to_dot(vocab: &Vocabulary, stats: &[PathStat]) -> String {
    let mut ids: HashMap<Vec<PredicateId>, usize> = HashMap::new();
    let mut nodes = String::new();
    let mut edges = String::new();
    let mut node_id = |prefix: &[PredicateId], nodes: &mut String| -> usize {
        if let Some(&i) = ids.get(prefix) {
            return i;
        }
        let i = ids.len();
        ids.insert(prefix.to_vec(), i);
        let _ = writeln!(
            nodes,
            "  n{i} [label=\"{}\"];",
            vocab.name(*prefix.last().expect("non-empty prefix")).replace('"', "\\\"")
        );
        i
    };
    let mut sorted: Vec<&PathStat> = stats.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for s in sorted {
        let p = &s.path.0;
        for k in 1..p.len() {
            node_id(&p[..k], &mut nodes);
        }
        let parent = node_id(&p[..p.len() - 1], &mut nodes);
        let child = node_id(p, &mut nodes);
        let color = if s.weight >= 0.0 { "black" } else { "red" };
        let _ = writeln!(
            edges,
            "  n{child} -> n{parent} [penwidth={:.3}, freq={}, weight_value={}, color={color}];",
            1.0 + 4.0 * s.frequency,
            s.frequency,
            s.weight
        );
    }
    format!("digraph logic_tree {{\n  rankdir=BT;\n{nodes}{edges}}}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    fn limits(d: usize, w: usize) -> TreeLimits {
        TreeLimits::new(d, w)
    }

    #[test]
    fn expand_root() {
        let t = LogicTree::new(A);
        let grown = t.expand(&LevelChoice::new(vec![vec![C, B]]), &limits(3, 2)).unwrap();
        assert_eq!(grown.paths(), vec![RulePath(vec![A, B]), RulePath(vec![A, C])]);
        assert_eq!(grown.frontier(), vec![(B, 1), (C, 1)]);
        assert!(!grown.is_terminal());
    }

    #[test]
    fn immediate_stop() {
        let t = LogicTree::new(A).expand(&LevelChoice::new(vec![vec![]]), &limits(3, 2)).unwrap();
        assert!(t.is_terminal());
        assert!(t.paths().is_empty());
        assert_eq!(t.canonical_key(), "0");
    }

    #[test]
    fn per_path_independence() {
        let l = limits(3, 2);
        let t = LogicTree::new(A).expand(&LevelChoice::new(vec![vec![B, C]]), &l).unwrap();
        let t = t.expand(&LevelChoice::new(vec![vec![], vec![B]]), &l).unwrap();
        assert_eq!(t.frontier(), vec![(B, 2)]);
        assert_eq!(
            t.paths(),
            vec![RulePath(vec![A, B]), RulePath(vec![A, C]), RulePath(vec![A, C, B])]
        );
    }

    #[test]
    fn expand_errors() {
        let l = limits(1, 2);
        let root = LogicTree::new(A);
        assert_eq!(
            root.expand(&LevelChoice::new(vec![vec![B, C, 3]]), &l),
            Err(TreeError::TooManyChildren { count: 3, width: 2 })
        );
        assert_eq!(
            root.expand(&LevelChoice::new(vec![vec![B, B]]), &l),
            Err(TreeError::DuplicateSibling(B))
        );
        assert_eq!(root.expand(&LevelChoice::new(vec![vec![A]]), &l), Err(TreeError::SelfLoop(A)));
        let one = root.expand(&LevelChoice::new(vec![vec![B]]), &l).unwrap();
        assert_eq!(
            one.expand(&LevelChoice::new(vec![vec![C]]), &l),
            Err(TreeError::DepthExceeded(1))
        );
        let done = one.expand(&LevelChoice::new(vec![vec![]]), &l).unwrap();
        assert_eq!(done.expand(&LevelChoice::new(vec![]), &l), Err(TreeError::Terminal));
        assert!(matches!(
            root.expand(&LevelChoice::new(vec![vec![], vec![]]), &l),
            Err(TreeError::FrontierMismatch { .. })
        ));
    }

    #[test]
    fn full_tree_path_count() {
        // Brute-force: build the full binary tree of depth 3 over 4 predicates
        // and count root-to-node paths by walking every node.
        let l = TreeLimits {
            max_depth: 3,
            max_width: 2,
            allow_self_loops: true,
        };
        let mut t = LogicTree::new(A);
        for _ in 0..3 {
            let choice = LevelChoice::new(vec![vec![B, C]; t.frontier_len()]);
            t = t.expand(&choice, &l).unwrap();
        }
        let nodes_below_root = t.nodes().len() - 1;
        assert_eq!(nodes_below_root, 14);
        assert_eq!(t.paths().len(), 14);
    }

    #[test]
    fn sibling_order_invariance() {
        let l = limits(2, 2);
        let x = LogicTree::new(A).expand(&LevelChoice::new(vec![vec![B, C]]), &l).unwrap();
        let y = LogicTree::new(A).expand(&LevelChoice::new(vec![vec![C, B]]), &l).unwrap();
        assert_eq!(x.canonical_key(), y.canonical_key());
        assert_eq!(x, y);
        assert_eq!(x.terminated().canonical_key(), "0(1,2)");
    }

    #[test]
    fn enumerate_small_spaces() {
        let trees = enumerate_terminal_trees(3, A, &limits(1, 1), DEFAULT_ENUMERATION_CAP).unwrap();
        let keys: Vec<String> = trees.iter().map(|t| t.canonical_key()).collect();
        assert_eq!(keys, vec!["0", "0(1)", "0(2)"]);

        let trees = enumerate_terminal_trees(3, A, &limits(1, 2), DEFAULT_ENUMERATION_CAP).unwrap();
        let keys: Vec<String> = trees.iter().map(|t| t.canonical_key()).collect();
        assert_eq!(keys, vec!["0", "0(1)", "0(2)", "0(1,2)"]);

        let trees = enumerate_terminal_trees(3, A, &limits(0, 2), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0], LogicTree::new(A).terminated());
    }

    #[test]
    fn enumeration_cap() {
        let err = enumerate_terminal_trees(8, A, &limits(3, 3), 1000).unwrap_err();
        assert!(matches!(err, TreeError::SpaceTooLarge { .. }));
    }

    #[test]
    fn enumeration_matches_counter() {
        for n in 1..=4 {
            for d in 0..=2 {
                for w in 1..=2 {
                    for self_loops in [false, true] {
                        let l = TreeLimits {
                            max_depth: d,
                            max_width: w,
                            allow_self_loops: self_loops,
                        };
                        let trees = enumerate_terminal_trees(n, 0, &l, DEFAULT_ENUMERATION_CAP).unwrap();
                        assert_eq!(trees.len() as u128, count_terminal_trees(n, 0, &l));
                        let mut keys: Vec<String> = trees.iter().map(|t| t.canonical_key()).collect();
                        keys.sort();
                        keys.dedup();
                        assert_eq!(keys.len(), trees.len());
                    }
                }
            }
        }
    }

    #[test]
    fn trajectory_reconstruction() {
        let l = limits(2, 2);
        for tree in enumerate_terminal_trees(4, A, &l, DEFAULT_ENUMERATION_CAP).unwrap() {
            let traj = tree.trajectory(&l).unwrap();
            traj.validate(&l).unwrap();
            assert_eq!(traj.terminal(), tree);
            assert!(traj.states.iter().all(|s| !s.is_terminal()));
        }
    }

    #[test]
    fn from_paths_builds_terminal_tree() {
        let t = LogicTree::from_paths(A, &[RulePath(vec![A, C, B]), RulePath(vec![A, B])]);
        assert!(t.is_terminal());
        assert_eq!(t.canonical_key(), "0(1,2(1))");
    }

    #[test]
    fn dot_has_frequency_attributes() {
        let vocab = Vocabulary::new(&["A", "B", "C"], &[0]).unwrap();
        let dot = to_dot(
            &vocab,
            &[
                PathStat {
                    path: RulePath(vec![A, B]),
                    frequency: 0.5,
                    weight: 1.0,
                },
                PathStat {
                    path: RulePath(vec![A, B, C]),
                    frequency: 0.25,
                    weight: -1.0,
                },
            ],
        );
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("freq=0.5"));
        assert!(dot.contains("freq=0.25"));
        assert!(dot.contains("color=red"));
        assert_eq!(dot.matches("->").count(), 2);
    }
}
