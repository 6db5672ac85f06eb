//! Ground-truth models and labeled synthetic datasets.
//!
//! Each sequence is simulated on `[0, horizon]`. Its label is the type of
//! the last target event; that event and everything after it are dropped
//! and the history's horizon becomes the label's time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EventSequence, Vocabulary};
use crate::tlpp::{simulate, CountTransform, RuleWeights, SimulationError, DEFAULT_MAX_EVENTS};
use crate::tree::RulePath;

/// Simulations without any target event are redrawn up to this many times.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid model: {0}")]
    Model(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("sequence {index}: no target event in {attempts} simulations")]
    NoTargetEvent { index: usize, attempts: usize },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRule {
    /// Predicate names, head first.
    pub path: Vec<String>,
    pub weight: f64,
}

/// Ground-truth temporal-logic model, the `gen` input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthModel {
    pub predicates: Vec<String>,
    pub targets: Vec<String>,
    pub rules: Vec<TruthRule>,
    /// Log base rate per predicate name; missing names get `default_base`.
    #[serde(default)]
    pub base: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_base: f64,
    pub horizon: f64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    #[serde(default)]
    pub count_transform: CountTransform,
}

fn default_max_events() -> usize {
    DEFAULT_MAX_EVENTS
}

/// A truth model resolved to ids.
#[derive(Debug, Clone)]
pub struct ResolvedTruth {
    pub vocabulary: Vocabulary,
    pub weights: RuleWeights,
    pub paths: Vec<RulePath>,
}

impl TruthModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let file_err = |message: String| SynthError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ResolvedTruth, SynthError> {
        let bad = |m: String| SynthError::Model(m);
        let lookup = |v: &Vocabulary, name: &str| v.id(name).ok_or_else(|| bad(format!("unknown predicate {name:?}")));
        let provisional = Vocabulary::new(&self.predicates, &[0]).map_err(|e| bad(e.to_string()))?;
        let targets = self
            .targets
            .iter()
            .map(|t| lookup(&provisional, t))
            .collect::<Result<Vec<_>, _>>()?;
        let vocabulary = Vocabulary::new(&self.predicates, &targets).map_err(|e| bad(e.to_string()))?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(bad(format!("horizon must be positive, got {}", self.horizon)));
        }
        let mut weights = RuleWeights::zeros(vocabulary.len());
        weights.base = vec![self.default_base; vocabulary.len()];
        for (name, &b) in &self.base {
            weights.base[lookup(&vocabulary, name)?] = b;
        }
        let mut paths = Vec::new();
        for rule in &self.rules {
            if rule.path.len() < 2 {
                return Err(bad(format!("rule {:?} needs a head and a body", rule.path)));
            }
            let ids = rule
                .path
                .iter()
                .map(|n| lookup(&vocabulary, n))
                .collect::<Result<Vec<_>, _>>()?;
            if !vocabulary.is_target(ids[0]) {
                return Err(bad(format!("rule head {:?} is not a target", rule.path[0])));
            }
            let p = RulePath(ids);
            weights.set(p.clone(), rule.weight);
            paths.push(p);
        }
        Ok(ResolvedTruth {
            vocabulary,
            weights,
            paths,
        })
    }

    /// Five types `A..E`; targets `A` and `C`; planted rules `A ← B` and
    /// `C ← D`; `E` is noise. Average history length is about 24.
    pub fn planted_five() -> Self {
        let names = ["A", "B", "C", "D", "E"];
        Self {
            predicates: names.iter().map(|s| s.to_string()).collect(),
            targets: vec!["A".into(), "C".into()],
            rules: vec![
                TruthRule {
                    path: vec!["A".into(), "B".into()],
                    weight: 0.5,
                },
                TruthRule {
                    path: vec!["C".into(), "D".into()],
                    weight: 0.5,
                },
            ],
            base: [("A", -1.0), ("B", 0.0), ("C", -1.0), ("D", 0.0), ("E", 0.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            default_base: 0.0,
            horizon: 4.0,
            max_events: DEFAULT_MAX_EVENTS,
            count_transform: CountTransform::Identity,
        }
    }
}

/// Cuts a simulated sequence at its last target event.
pub fn label_at_last_target(full: &EventSequence, vocab: &Vocabulary) -> Option<EventSequence> {
    let last = full.events.iter().rposition(|e| vocab.is_target(e.type_id))?;
    let label_event = full.events[last];
    let history = full.events[..last]
        .iter()
        .copied()
        .filter(|e| e.time < label_event.time)
        .collect();
    Some(EventSequence::new(history, label_event.time, label_event.type_id))
}

/// Simulates `n_sequences` labeled sequences. Sequence `i` uses its own
/// stream of the seeded generator, so outputs depend only on `(model,
/// n_sequences, horizon, seed)`.
pub fn generate_dataset(
    model: &TruthModel,
    n_sequences: usize,
    horizon: Option<f64>,
    seed: u64,
) -> Result<Dataset, SynthError> {
    let truth = model.resolve()?;
    let horizon = horizon.unwrap_or(model.horizon);
    let mut sequences = Vec::with_capacity(n_sequences);
    for index in 0..n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let mut labeled = None;
        for _ in 0..MAX_ATTEMPTS {
            let full = simulate(
                &truth.weights,
                &truth.paths,
                &truth.vocabulary,
                horizon,
                model.max_events,
                model.count_transform,
                &mut rng,
            )?;
            if let Some(s) = label_at_last_target(&full, &truth.vocabulary) {
                labeled = Some(s);
                break;
            }
        }
        sequences.push(labeled.ok_or(SynthError::NoTargetEvent {
            index,
            attempts: MAX_ATTEMPTS,
        })?);
    }
    Ok(Dataset::new(truth.vocabulary, sequences))
}
