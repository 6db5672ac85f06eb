//! Temporal-logic point process.
//!
//! Each target type `k` has intensity
//! `λ_k(t) = exp(clamp(Σ_{f: head(f)=k} w_f φ_f(X_t) + b_k, -30, 30))`,
//! where `φ_f` counts strictly time-ordered event tuples matching the body of
//! rule path `f`. All features only change at event times, so every
//! intensity is piecewise constant and the likelihood integral is an exact
//! sum over inter-event segments. Non-target events enter only through
//! features.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Event, EventSequence, PredicateId, Vocabulary};
use crate::tree::RulePath;

pub const EXPONENT_CLAMP: f64 = 30.0;
pub const DEFAULT_MAX_EVENTS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("simulation exceeded {0} events before the horizon")]
    Explosion(usize),
    #[error("intensity {intensity} at t={time} exceeds the thinning bound {bound}")]
    BoundViolated { intensity: f64, bound: f64, time: f64 },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
}

/// Transform applied to raw tuple counts before they enter the exponent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountTransform {
    #[default]
    Identity,
    Log1p,
}

impl CountTransform {
    pub fn apply(self, count: u64) -> f64 {
        match self {
            CountTransform::Identity => count as f64,
            CountTransform::Log1p => (count as f64).ln_1p(),
        }
    }
}

/// Rule weights `w_f` and per-type base rates `b_k`.
///
/// `base` is indexed by predicate id. The likelihood reads the entries of
/// target types only; the simulator uses every entry. Missing rule weights
/// read as zero. The same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleWeights {
    #[serde(with = "path_map")]
    pub weights: BTreeMap<RulePath, f64>,
    pub base: Vec<f64>,
}

mod path_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        path: Vec<PredicateId>,
        weight: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<RulePath, f64>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(p, &w)| Entry {
                path: p.0.clone(),
                weight: w,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<RulePath, f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (RulePath(e.path), e.weight)).collect())
    }
}

impl RuleWeights {
    pub fn zeros(n_predicates: usize) -> Self {
        Self {
            weights: BTreeMap::new(),
            base: vec![0.0; n_predicates],
        }
    }

    pub fn weight(&self, path: &RulePath) -> f64 {
        self.weights.get(path).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, path: RulePath, w: f64) {
        self.weights.insert(path, w);
    }

    /// Adds `scale * other` into `self`, creating missing rule entries.
    pub fn add_scaled(&mut self, other: &RuleWeights, scale: f64) {
        for (p, &g) in &other.weights {
            *self.weights.entry(p.clone()).or_insert(0.0) += scale * g;
        }
        for (b, &g) in self.base.iter_mut().zip(&other.base) {
            *b += scale * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.values().all(|w| w.is_finite()) && self.base.iter().all(|b| b.is_finite())
    }
}

/// Incremental dynamic-programming state for one rule path's feature.
///
/// `chains[i]` counts tuples matching `body[i..]` (deepest predicate
/// earliest, strictly increasing times) among the events pushed so far.
#[derive(Debug, Clone)]
struct FeatureState {
    body: Vec<PredicateId>,
    chains: Vec<u64>,
}

impl FeatureState {
    fn new(path: &RulePath) -> Self {
        Self {
            body: path.body().to_vec(),
            chains: vec![0; path.body().len()],
        }
    }

    /// Pushes all events sharing one timestamp. Tuples need strictly
    /// increasing times, so updates within the group read the old counts.
    fn push_group(&mut self, types: &[PredicateId]) {
        let j = self.body.len();
        if j == 0 {
            return;
        }
        let old = self.chains.clone();
        for i in 0..j {
            let matches = types.iter().filter(|&&e| e == self.body[i]).count() as u64;
            if matches == 0 {
                continue;
            }
            let tail = if i + 1 < j { old[i + 1] } else { 1 };
            self.chains[i] = self.chains[i].saturating_add(matches.saturating_mul(tail));
        }
    }

    fn value(&self) -> u64 {
        self.chains.first().copied().unwrap_or(0)
    }
}

/// Number of strictly time-ordered tuples in `events` before `t` whose types
/// match the body of `path`, deepest predicate earliest. Runs in
/// `O(|events| · |path|)`. A path with no body has no feature (0).
pub fn logic_feature(path: &RulePath, events: &[Event], t: f64) -> u64 {
    let mut state = FeatureState::new(path);
    let mut i = 0;
    while i < events.len() && events[i].time < t {
        let time = events[i].time;
        let start = i;
        while i < events.len() && events[i].time == time {
            i += 1;
        }
        let group: Vec<PredicateId> = events[start..i].iter().map(|e| e.type_id).collect();
        state.push_group(&group);
    }
    state.value()
}

/// Piecewise-constant view of a history: segment `s` spans
/// `[starts[s], starts[s+1])` and carries the features of all events at
/// times `<= starts[s]` (none for the first segment).
struct Timeline {
    /// `starts[0] = 0`, then each distinct event time; `ends` pairs them.
    starts: Vec<f64>,
    ends: Vec<f64>,
    /// `features[f][s]`, already transformed.
    features: Vec<Vec<f64>>,
    /// For each event, the segment whose features give its left limit.
    event_segment: Vec<usize>,
}

impl Timeline {
    fn build(seq: &EventSequence, paths: &[RulePath], transform: CountTransform) -> Self {
        let events = &seq.events;
        let mut starts = vec![0.0];
        let mut states: Vec<FeatureState> = paths.iter().map(FeatureState::new).collect();
        let mut features: Vec<Vec<f64>> = paths.iter().map(|_| vec![0.0]).collect();
        let mut event_segment = Vec::with_capacity(events.len());
        let mut i = 0;
        while i < events.len() {
            let time = events[i].time;
            let start = i;
            while i < events.len() && events[i].time == time {
                i += 1;
            }
            // Left limit at `time` is the segment currently open.
            let open = starts.len() - 1;
            event_segment.extend(std::iter::repeat_n(open, i - start));
            let group: Vec<PredicateId> = events[start..i].iter().map(|e| e.type_id).collect();
            for (st, feat) in states.iter_mut().zip(features.iter_mut()) {
                st.push_group(&group);
                feat.push(transform.apply(st.value()));
            }
            starts.push(time);
        }
        let mut ends: Vec<f64> = starts[1..].to_vec();
        ends.push(seq.horizon.max(*starts.last().expect("non-empty")));
        Self {
            starts,
            ends,
            features,
            event_segment,
        }
    }

    fn n_segments(&self) -> usize {
        self.starts.len()
    }

    fn duration(&self, s: usize) -> f64 {
        self.ends[s] - self.starts[s]
    }
}

/// Raw and clamped exponent for one target on one segment.
#[derive(Debug, Clone, Copy)]
struct Exponent {
    value: f64,
    clamped: bool,
}

impl Exponent {
    fn new(raw: f64) -> Self {
        let value = raw.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
        Self {
            value,
            clamped: raw > EXPONENT_CLAMP || raw < -EXPONENT_CLAMP,
        }
    }
}

/// Likelihood evaluator for a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tlpp {
    targets: Vec<PredicateId>,
    target_index: Vec<Option<usize>>,
    transform: CountTransform,
}

impl Tlpp {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self::with_transform(vocab, CountTransform::Identity)
    }

    pub fn with_transform(vocab: &Vocabulary, transform: CountTransform) -> Self {
        let mut target_index = vec![None; vocab.len()];
        for (i, &t) in vocab.targets().iter().enumerate() {
            target_index[t] = Some(i);
        }
        Self {
            targets: vocab.targets().to_vec(),
            target_index,
            transform,
        }
    }

    pub fn targets(&self) -> &[PredicateId] {
        &self.targets
    }

    pub fn transform(&self) -> CountTransform {
        self.transform
    }

    /// `λ_k(t)` using history strictly before `t`.
    pub fn intensity(
        &self,
        k: PredicateId,
        t: f64,
        weights: &RuleWeights,
        paths: &[RulePath],
        history: &EventSequence,
    ) -> f64 {
        let mut raw = weights.base[k];
        for p in paths.iter().filter(|p| p.head() == k) {
            raw += weights.weight(p) * self.transform.apply(logic_feature(p, &history.events, t));
        }
        Exponent::new(raw).value.exp()
    }

    /// Rule paths that feed some target's intensity, each once.
    fn active_paths(&self, paths: &[RulePath]) -> Vec<RulePath> {
        let mut out: Vec<RulePath> = paths
            .iter()
            .filter(|p| p.len() >= 2 && self.target_index.get(p.head()).copied().flatten().is_some())
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// `exponents[target][segment]`.
    fn exponents(&self, tl: &Timeline, paths: &[RulePath], weights: &RuleWeights) -> Vec<Vec<Exponent>> {
        let mut raw: Vec<Vec<f64>> = self
            .targets
            .iter()
            .map(|&k| vec![weights.base[k]; tl.n_segments()])
            .collect();
        for (f, p) in paths.iter().enumerate() {
            let ti = self.target_index[p.head()].expect("active path");
            let w = weights.weight(p);
            for (r, &phi) in raw[ti].iter_mut().zip(&tl.features[f]) {
                *r += w * phi;
            }
        }
        raw.into_iter()
            .map(|row| row.into_iter().map(Exponent::new).collect())
            .collect()
    }

    /// Negative log-likelihood of `seq` on `[0, horizon]`.
    pub fn nll(&self, seq: &EventSequence, weights: &RuleWeights, paths: &[RulePath]) -> f64 {
        self.nll_impl(seq, weights, paths, false).0
    }

    /// NLL and its gradient with respect to every `w_f` in `paths` and
    /// every target base rate.
    pub fn nll_and_grad(
        &self,
        seq: &EventSequence,
        weights: &RuleWeights,
        paths: &[RulePath],
    ) -> (f64, RuleWeights) {
        let (v, g) = self.nll_impl(seq, weights, paths, true);
        (v, g.expect("gradient requested"))
    }

    pub fn grad_nll(&self, seq: &EventSequence, weights: &RuleWeights, paths: &[RulePath]) -> RuleWeights {
        self.nll_and_grad(seq, weights, paths).1
    }

    fn nll_impl(
        &self,
        seq: &EventSequence,
        weights: &RuleWeights,
        paths: &[RulePath],
        want_grad: bool,
    ) -> (f64, Option<RuleWeights>) {
        let paths = self.active_paths(paths);
        let tl = Timeline::build(seq, &paths, self.transform);
        let eta = self.exponents(&tl, &paths, weights);

        let mut grad_base = vec![0.0; weights.base.len()];
        let mut grad_w = vec![0.0; paths.len()];
        let mut value = 0.0;

        for (ev, &s) in seq.events.iter().zip(&tl.event_segment) {
            let Some(ti) = self.target_index[ev.type_id] else {
                continue;
            };
            let e = eta[ti][s];
            value -= e.value;
            if want_grad && !e.clamped {
                grad_base[ev.type_id] -= 1.0;
                for (f, p) in paths.iter().enumerate() {
                    if p.head() == ev.type_id {
                        grad_w[f] -= tl.features[f][s];
                    }
                }
            }
        }
        for (ti, &k) in self.targets.iter().enumerate() {
            for s in 0..tl.n_segments() {
                let dt = tl.duration(s);
                if dt <= 0.0 {
                    continue;
                }
                let e = eta[ti][s];
                let mass = e.value.exp() * dt;
                value += mass;
                if want_grad && !e.clamped {
                    grad_base[k] += mass;
                    for (f, p) in paths.iter().enumerate() {
                        if p.head() == k {
                            grad_w[f] += tl.features[f][s] * mass;
                        }
                    }
                }
            }
        }
        let grad = want_grad.then(|| RuleWeights {
            weights: paths.into_iter().zip(grad_w).collect(),
            base: grad_base,
        });
        (value, grad)
    }

    /// Clamped exponents of every target just after the horizon, using the
    /// whole history.
    fn horizon_exponents(
        &self,
        seq: &EventSequence,
        weights: &RuleWeights,
        paths: &[RulePath],
    ) -> (Vec<RulePath>, Timeline, Vec<Exponent>) {
        let paths = self.active_paths(paths);
        let tl = Timeline::build(seq, &paths, self.transform);
        let last = tl.n_segments() - 1;
        let eta = self.exponents(&tl, &paths, weights);
        let at_horizon = eta.iter().map(|row| row[last]).collect();
        (paths, tl, at_horizon)
    }

    /// `p(Y = k) = λ_k(T) / Σ_k' λ_k'(T)` over targets, in target order.
    pub fn predict_label_dist(&self, seq: &EventSequence, weights: &RuleWeights, paths: &[RulePath]) -> Vec<f64> {
        let (_, _, eta) = self.horizon_exponents(seq, weights, paths);
        softmax(&eta.iter().map(|e| e.value).collect::<Vec<_>>())
    }

    /// `log p(Y = label)` and its gradient over the same parameters as
    /// [`Tlpp::nll_and_grad`].
    pub fn log_predict_and_grad(
        &self,
        seq: &EventSequence,
        weights: &RuleWeights,
        paths: &[RulePath],
        label: PredicateId,
    ) -> (f64, RuleWeights) {
        let (paths, tl, eta) = self.horizon_exponents(seq, weights, paths);
        let last = tl.n_segments() - 1;
        let values: Vec<f64> = eta.iter().map(|e| e.value).collect();
        let probs = softmax(&values);
        let yi = self.target_index[label].expect("label must be a target");
        let logp = values[yi] - log_sum_exp(&values);

        // d log p_Y / d eta_k = [k == Y] - p_k, zero where clamped.
        let coef: Vec<f64> = (0..self.targets.len())
            .map(|ti| {
                if eta[ti].clamped {
                    0.0
                } else {
                    (ti == yi) as u8 as f64 - probs[ti]
                }
            })
            .collect();
        let mut base = vec![0.0; weights.base.len()];
        for (ti, &k) in self.targets.iter().enumerate() {
            base[k] = coef[ti];
        }
        let w = paths
            .iter()
            .enumerate()
            .map(|(f, p)| {
                let ti = self.target_index[p.head()].expect("active path");
                (p.clone(), coef[ti] * tl.features[f][last])
            })
            .collect();
        (logp, RuleWeights { weights: w, base })
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

// ---------------------------------------------------------------------------
// Simulation

/// Draws a sequence on `[0, horizon]` in which every vocabulary type fires
/// with intensity `exp(clamp(b_k + Σ_{f: head=k} w_f φ_f))`.
///
/// Intensities are constant between events, so sampling is exact by
/// competing exponentials. The returned sequence's label is set to the
/// first target; callers that need a label convention apply it afterwards.
pub fn simulate<R: Rng + ?Sized>(
    weights: &RuleWeights,
    paths: &[RulePath],
    vocab: &Vocabulary,
    horizon: f64,
    max_events: usize,
    transform: CountTransform,
    rng: &mut R,
) -> Result<EventSequence, SimulationError> {
    if !(horizon > 0.0) {
        return Err(SimulationError::BadHorizon(horizon));
    }
    let n = vocab.len();
    let mut states: Vec<FeatureState> = paths.iter().map(FeatureState::new).collect();
    let rate = |states: &[FeatureState]| -> Vec<f64> {
        let mut raw: Vec<f64> = (0..n).map(|k| weights.base[k]).collect();
        for (p, st) in paths.iter().zip(states) {
            raw[p.head()] += weights.weight(p) * transform.apply(st.value());
        }
        raw.into_iter().map(|r| Exponent::new(r).value.exp()).collect()
    };
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut lambdas = rate(&states);
    loop {
        let total: f64 = lambdas.iter().sum();
        let gap = Exp::new(total).expect("positive total rate").sample(rng);
        t += gap;
        if t > horizon {
            break;
        }
        if events.len() >= max_events {
            return Err(SimulationError::Explosion(max_events));
        }
        let k = pick(&lambdas, total, rng);
        events.push(Event::new(t, k));
        for st in &mut states {
            st.push_group(&[k]);
        }
        lambdas = rate(&states);
    }
    Ok(EventSequence {
        events,
        horizon,
        label: vocab.targets()[0],
    })
}

/// Ogata thinning for intensities that are not piecewise constant.
///
/// `intensity(k, t, history)` must stay below `upper_bound` for the summed
/// rate over all types; a violation is reported rather than silently
/// biasing the sample.
pub fn simulate_thinning<R, F>(
    intensity: F,
    n_types: usize,
    upper_bound: f64,
    horizon: f64,
    max_events: usize,
    rng: &mut R,
) -> Result<Vec<Event>, SimulationError>
where
    R: Rng + ?Sized,
    F: Fn(PredicateId, f64, &[Event]) -> f64,
{
    if !(horizon > 0.0) {
        return Err(SimulationError::BadHorizon(horizon));
    }
    let proposal = Exp::new(upper_bound).expect("positive bound");
    let mut events: Vec<Event> = Vec::new();
    let mut t = 0.0;
    loop {
        t += proposal.sample(rng);
        if t > horizon {
            break;
        }
        let lambdas: Vec<f64> = (0..n_types).map(|k| intensity(k, t, &events)).collect();
        let total: f64 = lambdas.iter().sum();
        if total > upper_bound {
            return Err(SimulationError::BoundViolated {
                intensity: total,
                bound: upper_bound,
                time: t,
            });
        }
        if rng.random::<f64>() * upper_bound <= total {
            if events.len() >= max_events {
                return Err(SimulationError::Explosion(max_events));
            }
            events.push(Event::new(t, pick(&lambdas, total, rng)));
        }
    }
    Ok(events)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
