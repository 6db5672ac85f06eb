//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use logictree::data::{Event, EventSequence, PredicateId, Vocabulary};
use logictree::tlpp::RuleWeights;
use logictree::tree::RulePath;
use rand::Rng;

pub const CLAMP: f64 = 30.0;

/// Counts body tuples by explicit enumeration: choose an event for the
/// first body predicate strictly before `t`, then one for the next body
/// predicate strictly before that, and so on.
pub fn brute_feature(path: &RulePath, events: &[Event], t: f64) -> u64 {
    fn go(body: &[PredicateId], events: &[Event], before: f64) -> u64 {
        match body.split_first() {
            None => 1,
            Some((&p, rest)) => events
                .iter()
                .filter(|e| e.type_id == p && e.time < before)
                .map(|e| go(rest, events, e.time))
                .sum(),
        }
    }
    if path.0.len() < 2 {
        return 0;
    }
    go(&path.0[1..], events, t)
}

pub fn oracle_intensity(k: PredicateId, t: f64, w: &RuleWeights, paths: &[RulePath], events: &[Event]) -> f64 {
    oracle_intensity_with(k, t, w, paths, events, |c| c as f64)
}

/// Same, with `transform` applied to each brute-force count.
pub fn oracle_intensity_with(
    k: PredicateId,
    t: f64,
    w: &RuleWeights,
    paths: &[RulePath],
    events: &[Event],
    transform: fn(u64) -> f64,
) -> f64 {
    let mut x = w.base[k];
    for p in paths.iter().filter(|p| p.0[0] == k) {
        x += w.weight(p) * transform(brute_feature(p, events, t));
    }
    x.clamp(-CLAMP, CLAMP).exp()
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 60)
}

/// NLL from pointwise intensities: left-limit log terms for target
/// events plus quadrature of every target intensity. Quadrature runs
/// separately on each inter-event interval so that jumps only ever sit
/// on interval endpoints, where the integrand's one-sided value is used.
pub fn oracle_nll(vocab: &Vocabulary, seq: &EventSequence, w: &RuleWeights, paths: &[RulePath], tol: f64) -> f64 {
    oracle_nll_with(vocab, seq, w, paths, tol, |c| c as f64)
}

pub fn oracle_nll_with(
    vocab: &Vocabulary,
    seq: &EventSequence,
    w: &RuleWeights,
    paths: &[RulePath],
    tol: f64,
    transform: fn(u64) -> f64,
) -> f64 {
    let oracle_intensity = |k, t, w, paths, events| oracle_intensity_with(k, t, w, paths, events, transform);
    let mut value = 0.0;
    for e in &seq.events {
        if vocab.is_target(e.type_id) {
            value -= oracle_intensity(e.type_id, e.time, w, paths, &seq.events).ln();
        }
    }
    let mut cuts: Vec<f64> = vec![0.0];
    cuts.extend(seq.events.iter().map(|e| e.time).filter(|&t| t > 0.0 && t < seq.horizon));
    cuts.push(seq.horizon);
    cuts.dedup();
    for &k in vocab.targets() {
        for win in cuts.windows(2) {
            let (a, b) = (win[0], win[1]);
            // Inside (a, b] the history is fixed to events before b; sample
            // the interior only and treat the endpoints as limits from inside.
            let f = |t: f64| {
                let tt = t.clamp(a + (b - a) * 1e-12, b);
                oracle_intensity(k, tt, w, paths, &seq.events)
            };
            value += adaptive_simpson(&f, a, b, tol);
        }
    }
    value
}

/// Adaptive quadrature over the whole horizon, without any knowledge of
/// where the intensity jumps.
pub fn oracle_integral_blind(vocab: &Vocabulary, seq: &EventSequence, w: &RuleWeights, paths: &[RulePath], tol: f64) -> f64 {
    vocab
        .targets()
        .iter()
        .map(|&k| adaptive_simpson(&|t| oracle_intensity(k, t, w, paths, &seq.events), 0.0, seq.horizon, tol))
        .sum()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = f(x);
    x[i] = x0 - h;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

/// Largest componentwise relative error, with `floor` guarding components
/// that are zero in both vectors up to rounding.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_history<R: Rng>(rng: &mut R, n_types: usize, max_len: usize, horizon: f64) -> Vec<Event> {
    let len = rng.random_range(0..=max_len);
    let mut events: Vec<Event> = (0..len)
        .map(|_| {
            let mut t = rng.random_range(0.0..horizon);
            if rng.random_bool(0.2) {
                // Coarse grid so some events share a timestamp.
                t = (t * 4.0).floor() / 4.0;
            }
            Event::new(t, rng.random_range(0..n_types))
        })
        .collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.type_id.cmp(&b.type_id)));
    events
}

pub fn random_path<R: Rng>(rng: &mut R, n_types: usize, heads: &[PredicateId], max_len: usize) -> RulePath {
    let len = rng.random_range(2..=max_len);
    let mut p = vec![heads[rng.random_range(0..heads.len())]];
    while p.len() < len {
        p.push(rng.random_range(0..n_types));
    }
    RulePath(p)
}

/// A random likelihood instance: vocabulary, labeled sequence, rule paths
/// with moderate weights and base rates.
pub struct Instance {
    pub vocab: Vocabulary,
    pub seq: EventSequence,
    pub paths: Vec<RulePath>,
    pub weights: RuleWeights,
}

pub fn random_instance<R: Rng>(rng: &mut R, max_events: usize) -> Instance {
    let n = rng.random_range(2..=4);
    let names: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
    let n_targets = rng.random_range(1..=n.min(2));
    let targets: Vec<usize> = (0..n_targets).collect();
    let vocab = Vocabulary::new(&names, &targets).unwrap();
    let horizon = rng.random_range(0.5..3.0);
    let events = random_history(rng, n, max_events, horizon);
    let label = targets[rng.random_range(0..targets.len())];
    let seq = EventSequence::new(events, horizon, label);
    let mut paths: Vec<RulePath> = (0..rng.random_range(0..=4))
        .map(|_| random_path(rng, n, &targets, 3))
        .collect();
    paths.sort();
    paths.dedup();
    let mut weights = RuleWeights::zeros(n);
    for b in &mut weights.base {
        *b = rng.random_range(-1.0..1.0);
    }
    for p in &paths {
        weights.set(p.clone(), rng.random_range(-0.8..0.8));
    }
    Instance {
        vocab,
        seq,
        paths,
        weights,
    }
}
