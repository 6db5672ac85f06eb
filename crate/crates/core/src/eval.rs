//! Prediction, metrics, ELBO by enumeration and planted-rule recovery.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EventSequence, PredicateId, Vocabulary};
use crate::policy::{Condition, Exploration, LinearPolicy};
use crate::tlpp::{log_sum_exp, RuleWeights, Tlpp};
use crate::tree::{enumerate_terminal_forests, LogicTree, RulePath, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no prediction records")]
    Empty,
}

/// The pieces of a model needed for prediction.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub vocabulary: &'a Vocabulary,
    pub theta: &'a LinearPolicy,
    pub weights: &'a RuleWeights,
    pub tlpp: &'a Tlpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sequence_id: usize,
    /// Targets, most likely first.
    pub ranking: Vec<PredicateId>,
    /// Averaged predictive probability of each entry of `ranking`.
    pub scores: Vec<f64>,
    pub label: PredicateId,
    /// Mean NLL of the history under the sampled explanations.
    pub nll: f64,
}

impl PredictionRecord {
    /// 1-based rank of the label.
    pub fn rank(&self) -> usize {
        self.ranking
            .iter()
            .position(|&t| t == self.label)
            .map(|i| i + 1)
            .unwrap_or(self.ranking.len() + 1)
    }

    pub fn is_correct(&self) -> bool {
        self.ranking.first() == Some(&self.label)
    }
}

/// Sorts `targets` by decreasing score, ties by predicate id.
pub fn rank_targets(targets: &[PredicateId], scores: &[f64]) -> (Vec<PredicateId>, Vec<f64>) {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(targets[a].cmp(&targets[b])));
    (
        order.iter().map(|&i| targets[i]).collect(),
        order.iter().map(|&i| scores[i]).collect(),
    )
}

/// One explanation for an unlabeled history: a forest over all target
/// roots, sampled with the label slot left neutral.
pub fn sample_explanation<R: Rng + ?Sized>(
    model: ModelRef<'_>,
    seq: &EventSequence,
    rng: &mut R,
) -> (LogicTree, Vec<RulePath>) {
    let cond = Condition::new(seq, model.vocabulary, None);
    let tree = model
        .theta
        .sample_tree(model.vocabulary.targets(), Some(&cond), rng, &Exploration::ON_POLICY);
    let paths = tree.paths();
    (tree, paths)
}

/// Averages the label distribution over `n_samples` sampled explanations.
pub fn predict<R: Rng + ?Sized>(
    model: ModelRef<'_>,
    seq: &EventSequence,
    sequence_id: usize,
    n_samples: usize,
    rng: &mut R,
) -> PredictionRecord {
    assert!(n_samples >= 1, "n_samples must be at least 1");
    let targets = model.vocabulary.targets();
    let mut avg = vec![0.0; targets.len()];
    let mut nll = 0.0;
    for _ in 0..n_samples {
        let (_, paths) = sample_explanation(model, seq, rng);
        let dist = model.tlpp.predict_label_dist(seq, model.weights, &paths);
        for (a, p) in avg.iter_mut().zip(dist) {
            *a += p / n_samples as f64;
        }
        nll += model.tlpp.nll(seq, model.weights, &paths) / n_samples as f64;
    }
    let (ranking, scores) = rank_targets(targets, &avg);
    PredictionRecord {
        sequence_id,
        ranking,
        scores,
        label: seq.label,
        nll,
    }
}

/// Deterministic per-sequence stream derived from `seed` and the id.
pub fn sequence_rng(seed: u64, sequence_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence_id as u64 + 1);
    rng
}

/// Predicts every `(id, sequence)` pair in parallel.
pub fn predict_all(
    model: ModelRef<'_>,
    sequences: &[(usize, &EventSequence)],
    n_samples: usize,
    seed: u64,
) -> Vec<PredictionRecord> {
    sequences
        .par_iter()
        .map(|&(id, seq)| predict(model, seq, id, n_samples, &mut sequence_rng(seed, id)))
        .collect()
}

pub fn error_rate(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().filter(|r| !r.is_correct()).count() as f64 / records.len() as f64)
}

pub fn mean_rank(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().map(|r| r.rank() as f64).sum::<f64>() / records.len() as f64)
}

pub fn mean_nll(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().map(|r| r.nll).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub er: f64,
    pub mr: f64,
}

/// Expected metrics of a uniformly random ranking over `k` targets.
pub fn uniform_baseline(k: usize) -> Metrics {
    Metrics {
        er: 1.0 - 1.0 / k as f64,
        mr: (k as f64 + 1.0) / 2.0,
    }
}

/// Ranks targets by their frequency among `train_labels` (ties by id) and
/// scores that fixed ranking on `labels`.
pub fn majority_baseline(targets: &[PredicateId], train_labels: &[PredicateId], labels: &[PredicateId]) -> Metrics {
    let counts: Vec<f64> = targets
        .iter()
        .map(|t| train_labels.iter().filter(|&&l| l == *t).count() as f64)
        .collect();
    let (ranking, _) = rank_targets(targets, &counts);
    let n = labels.len().max(1) as f64;
    let rank = |l: &PredicateId| ranking.iter().position(|t| t == l).map_or(ranking.len() + 1, |i| i + 1);
    Metrics {
        er: labels.iter().filter(|l| rank(l) != 1).count() as f64 / n,
        mr: labels.iter().map(|l| rank(l) as f64).sum::<f64>() / n,
    }
}

// ---------------------------------------------------------------------------
// ELBO

/// The exact posterior over forests on the target roots, by enumeration.
#[derive(Debug, Clone)]
pub struct EnumeratedPosterior {
    pub trees: Vec<LogicTree>,
    /// `log p(X | R) + log p(Y | X, R) + log p_φ(R)` per tree.
    pub log_joint: Vec<f64>,
    pub log_marginal: f64,
}

impl EnumeratedPosterior {
    pub fn posterior(&self) -> Vec<f64> {
        self.log_joint.iter().map(|l| (l - self.log_marginal).exp()).collect()
    }
}

pub fn enumerate_posterior(
    tlpp: &Tlpp,
    seq: &EventSequence,
    weights: &RuleWeights,
    phi: &LinearPolicy,
    cap: u64,
) -> Result<EnumeratedPosterior, TreeError> {
    let trees = enumerate_terminal_forests(phi.map.n_predicates, tlpp.targets(), &phi.limits, cap)?;
    let yi = tlpp
        .targets()
        .iter()
        .position(|&t| t == seq.label)
        .expect("label must be a target");
    let log_joint: Vec<f64> = trees
        .iter()
        .map(|t| {
            let paths = t.paths();
            let p = tlpp.predict_label_dist(seq, weights, &paths);
            -tlpp.nll(seq, weights, &paths) + p[yi].ln() + phi.tree_logprob(t, None).expect("enumerated tree")
        })
        .collect();
    let log_marginal = log_sum_exp(&log_joint);
    Ok(EnumeratedPosterior {
        trees,
        log_joint,
        log_marginal,
    })
}

/// `Σ_R q(R) [log p(X, Y, R) - log q(R)]` for an explicit `q` aligned
/// with `posterior.trees`. Entries with `q = 0` contribute nothing.
pub fn elbo_with_q(posterior: &EnumeratedPosterior, q: &[f64]) -> f64 {
    q.iter()
        .zip(&posterior.log_joint)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &lj)| qi * (lj - qi.ln()))
        .sum()
}

/// ELBO with `q` the terminating distribution of `theta` conditioned on
/// `(X, Y)`.
pub fn elbo(
    tlpp: &Tlpp,
    vocab: &Vocabulary,
    seq: &EventSequence,
    theta: &LinearPolicy,
    weights: &RuleWeights,
    phi: &LinearPolicy,
    cap: u64,
) -> Result<f64, TreeError> {
    let post = enumerate_posterior(tlpp, seq, weights, phi, cap)?;
    let cond = Condition::new(seq, vocab, Some(seq.label));
    let logq: Vec<f64> = post
        .trees
        .iter()
        .map(|t| theta.tree_logprob(t, Some(&cond)))
        .collect::<Result<_, _>>()?;
    let z = log_sum_exp(&logq);
    let q: Vec<f64> = logq.iter().map(|l| (l - z).exp()).collect();
    Ok(elbo_with_q(&post, &q))
}

// ---------------------------------------------------------------------------
// Rule recovery

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub path: RulePath,
    pub weight: f64,
    pub frequency: f64,
    pub score: f64,
}

/// Fraction of sampled posterior trees containing each path, over the
/// given labeled sequences and `n_samples` trees per sequence.
pub fn posterior_path_frequencies(
    theta: &LinearPolicy,
    vocab: &Vocabulary,
    sequences: &[&EventSequence],
    n_samples: usize,
    seed: u64,
) -> BTreeMap<RulePath, f64> {
    let per_seq: Vec<BTreeMap<RulePath, usize>> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = sequence_rng(seed, i);
            let cond = Condition::new(seq, vocab, Some(seq.label));
            let mut counts = BTreeMap::new();
            for _ in 0..n_samples {
                let tree = theta.sample_tree(vocab.targets(), Some(&cond), &mut rng, &Exploration::ON_POLICY);
                for p in tree.paths() {
                    *counts.entry(p).or_insert(0) += 1;
                }
            }
            counts
        })
        .collect();
    let total = (sequences.len() * n_samples).max(1) as f64;
    let mut freq = BTreeMap::new();
    for counts in per_seq {
        for (p, c) in counts {
            *freq.entry(p).or_insert(0.0) += c as f64 / total;
        }
    }
    freq
}

/// Paths ranked by `|w_f| · frequency`, ties by frequency, then path.
pub fn rank_paths(weights: &RuleWeights, frequencies: &BTreeMap<RulePath, f64>) -> Vec<ScoredPath> {
    let mut keys: Vec<&RulePath> = weights.weights.keys().chain(frequencies.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut scored: Vec<ScoredPath> = keys
        .into_iter()
        .filter(|p| p.len() >= 2)
        .map(|p| {
            let weight = weights.weight(p);
            let frequency = frequencies.get(p).copied().unwrap_or(0.0);
            ScoredPath {
                path: p.clone(),
                weight,
                frequency,
                score: weight.abs() * frequency,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.frequency.total_cmp(&a.frequency))
            .then(a.path.cmp(&b.path))
    });
    scored
}

/// Precision and recall at `k` of `planted` among the ranked paths.
pub fn recovery_at_k(ranked: &[ScoredPath], planted: &[RulePath], k: usize) -> Recovery {
    if k == 0 {
        return Recovery {
            precision: 0.0,
            recall: 0.0,
        };
    }
    let top: Vec<&RulePath> = ranked.iter().take(k).map(|s| &s.path).collect();
    let hits = planted.iter().filter(|p| top.contains(p)).count() as f64;
    Recovery {
        precision: hits / k as f64,
        recall: if planted.is_empty() { 0.0 } else { hits / planted.len() as f64 },
    }
}

/// Ranks learned paths on `sequences` and scores them against `planted`.
pub fn rule_recovery(
    model: ModelRef<'_>,
    sequences: &[&EventSequence],
    planted: &[RulePath],
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Recovery {
    let freq = posterior_path_frequencies(model.theta, model.vocabulary, sequences, n_samples, seed);
    recovery_at_k(&rank_paths(model.weights, &freq), planted, k)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub er: f64,
    pub mr: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub uniform: Metrics,
    pub majority: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_sequences: usize,
    pub n_samples: usize,
    pub er: f64,
    pub mr: f64,
    pub nll: f64,
    pub er_std: f64,
    pub mr_std: f64,
    pub nll_std: f64,
    pub baselines: Baselines,
    pub per_seed: Vec<SeedMetrics>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Evaluates `sequences` once per seed. Returns the report and the
/// records of the first seed.
pub fn evaluate(
    model: ModelRef<'_>,
    split: &str,
    sequences: &[(usize, &EventSequence)],
    train_labels: &[PredicateId],
    n_samples: usize,
    seeds: &[u64],
) -> Result<(EvalReport, Vec<PredictionRecord>), EvalError> {
    if sequences.is_empty() || seeds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_seed = Vec::new();
    let mut first = None;
    for &seed in seeds {
        let records = predict_all(model, sequences, n_samples, seed);
        per_seed.push(SeedMetrics {
            seed,
            er: error_rate(&records)?,
            mr: mean_rank(&records)?,
            nll: mean_nll(&records)?,
        });
        first.get_or_insert(records);
    }
    let (er, er_std) = mean_std(&per_seed.iter().map(|s| s.er).collect::<Vec<_>>());
    let (mr, mr_std) = mean_std(&per_seed.iter().map(|s| s.mr).collect::<Vec<_>>());
    let (nll, nll_std) = mean_std(&per_seed.iter().map(|s| s.nll).collect::<Vec<_>>());
    let labels: Vec<PredicateId> = sequences.iter().map(|(_, s)| s.label).collect();
    let targets = model.vocabulary.targets();
    let report = EvalReport {
        split: split.to_string(),
        n_sequences: sequences.len(),
        n_samples,
        er,
        mr,
        nll,
        er_std,
        mr_std,
        nll_std,
        baselines: Baselines {
            uniform: uniform_baseline(targets.len()),
            majority: majority_baseline(targets, train_labels, &labels),
        },
        per_seed,
    };
    Ok((report, first.expect("at least one seed")))
}

/// Prediction records as CSV, predicates by name.
pub fn records_to_csv(records: &[PredictionRecord], vocab: &Vocabulary) -> String {
    let mut out = String::from("sequence_id,label,rank,ranking,scores,nll\n");
    for r in records {
        let ranking: Vec<&str> = r.ranking.iter().map(|&t| vocab.name(t)).collect();
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.6}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.sequence_id,
            vocab.name(r.label),
            r.rank(),
            ranking.join(";"),
            scores.join(";"),
            r.nll
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use crate::tree::{TreeLimits, DEFAULT_ENUMERATION_CAP};

    fn record(ranking: Vec<usize>, label: usize) -> PredictionRecord {
        PredictionRecord {
            sequence_id: 0,
            scores: vec![0.0; ranking.len()],
            ranking,
            label,
            nll: 0.0,
        }
    }

    #[test]
    fn metric_arithmetic() {
        let right = record(vec![0, 1], 0);
        let wrong = record(vec![1, 0], 0);
        assert_eq!(error_rate(&[right.clone(), right.clone()]).unwrap(), 0.0);
        assert_eq!(error_rate(&[wrong.clone()]).unwrap(), 1.0);
        let four = [right.clone(), right.clone(), right.clone(), wrong.clone()];
        assert_eq!(error_rate(&four).unwrap(), 0.25);
        assert_eq!(mean_rank(&[right]).unwrap(), 1.0);
        assert_eq!(mean_rank(&[wrong]).unwrap(), 2.0);
        assert_eq!(error_rate(&[]), Err(EvalError::Empty));
        assert_eq!(mean_rank(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn ties_rank_by_id() {
        let (r, _) = rank_targets(&[4, 1, 2], &[0.2, 0.2, 0.2]);
        assert_eq!(r, vec![1, 2, 4]);
    }

    #[test]
    fn empty_trees_give_uniform_scores() {
        let v = Vocabulary::new(&["A", "B", "C"], &[0, 2]).unwrap();
        let tlpp = Tlpp::new(&v);
        let mut theta = LinearPolicy::new(&v, TreeLimits::new(2, 2), true);
        // Make every first decision a stop.
        let stop = theta.stop_token();
        for r in 0..3 {
            theta.params.set(r, stop, 50.0);
        }
        let w = RuleWeights::zeros(3);
        let model = ModelRef {
            vocabulary: &v,
            theta: &theta,
            weights: &w,
            tlpp: &tlpp,
        };
        let seq = EventSequence::new(vec![Event::new(0.5, 1)], 1.0, 2);
        let rec = predict(model, &seq, 0, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(rec.ranking, vec![0, 2]);
        assert!((rec.scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn recovery_edge_cases() {
        let planted = vec![RulePath(vec![0, 1])];
        let ranked = vec![ScoredPath {
            path: RulePath(vec![0, 1]),
            weight: 1.0,
            frequency: 1.0,
            score: 1.0,
        }];
        assert_eq!(
            recovery_at_k(&ranked, &planted, 0),
            Recovery {
                precision: 0.0,
                recall: 0.0
            }
        );
        assert_eq!(
            recovery_at_k(&ranked, &planted, 1),
            Recovery {
                precision: 1.0,
                recall: 1.0
            }
        );
    }

    #[test]
    fn elbo_at_posterior_is_log_marginal() {
        let v = Vocabulary::new(&["A", "B", "C"], &[0]).unwrap();
        let tlpp = Tlpp::new(&v);
        let seq = EventSequence::new(vec![Event::new(0.3, 1), Event::new(0.6, 0), Event::new(0.8, 2)], 1.0, 0);
        let mut w = RuleWeights::zeros(3);
        w.set(RulePath(vec![0, 1]), 0.7);
        let phi = LinearPolicy::new(&v, TreeLimits::new(2, 2), false);
        let post = enumerate_posterior(&tlpp, &seq, &w, &phi, DEFAULT_ENUMERATION_CAP).unwrap();
        let e = elbo_with_q(&post, &post.posterior());
        assert!((e - post.log_marginal).abs() < 1e-9);
    }

    #[test]
    fn majority_baseline_ranks_by_frequency() {
        let m = majority_baseline(&[0, 2], &[2, 2, 0], &[2, 0]);
        assert_eq!(m.er, 0.5);
        assert_eq!(m.mr, 1.5);
    }
}
