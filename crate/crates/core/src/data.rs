//! Event sequences, vocabularies and the JSON dataset format.
//!
//! Predicate names are the canonical identity in files. Ids are dense and
//! assigned by file order, so a vocabulary entry's `id` must equal its
//! position. Event types and labels may be written either as an integer id
//! or as a predicate name.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a predicate (event type); dense `0..N`.
pub type PredicateId = usize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: cannot read file: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown predicate {name:?} at {location}")]
    UnknownPredicate { name: String, location: String },
    #[error("label-not-target: label {label:?} at {location} is not a target predicate")]
    LabelNotTarget { label: String, location: String },
    #[error("negative time {time} at {location}")]
    NegativeTime { time: f64, location: String },
    #[error("invalid vocabulary at {location}: {message}")]
    InvalidVocabulary { location: String, message: String },
    #[error("horizon {horizon} at {location} precedes the last event time {last}")]
    HorizonBeforeLastEvent {
        horizon: f64,
        last: f64,
        location: String,
    },
    #[error("split needs at least 10 sequences, got {0}")]
    TooFewSequences(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub id: PredicateId,
    pub name: String,
}

/// The predicate space `Z` plus the subset of target (head) predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    predicates: Vec<Predicate>,
    targets: Vec<PredicateId>,
    by_name: HashMap<String, PredicateId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    names: Vec<String>,
    targets: Vec<PredicateId>,
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            names: v.predicates.into_iter().map(|p| p.name).collect(),
            targets: v.targets,
        }
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = DataError;

    fn try_from(r: VocabularyRepr) -> Result<Self, DataError> {
        Vocabulary::new(&r.names, &r.targets)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from names (ids follow order) and target ids.
    pub fn new<S: AsRef<str>>(names: &[S], targets: &[PredicateId]) -> Result<Self, DataError> {
        let invalid = |message: String| DataError::InvalidVocabulary {
            location: "vocabulary".into(),
            message,
        };
        if names.is_empty() {
            return Err(invalid("vocabulary is empty".into()));
        }
        let mut by_name = HashMap::new();
        let mut predicates = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(invalid(format!("predicate {id} has an empty name")));
            }
            if by_name.insert(name.to_string(), id).is_some() {
                return Err(invalid(format!("duplicate predicate name {name:?}")));
            }
            predicates.push(Predicate {
                id,
                name: name.to_string(),
            });
        }
        let set: BTreeSet<PredicateId> = targets.iter().copied().collect();
        if set.is_empty() {
            return Err(invalid("no target predicates".into()));
        }
        if let Some(bad) = set.iter().find(|&&t| t >= names.len()) {
            return Err(invalid(format!("target id {bad} out of range")));
        }
        Ok(Self {
            predicates,
            targets: set.into_iter().collect(),
            by_name,
        })
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    /// Target predicate ids in increasing order.
    pub fn targets(&self) -> &[PredicateId] {
        &self.targets
    }

    pub fn is_target(&self, id: PredicateId) -> bool {
        self.targets.binary_search(&id).is_ok()
    }

    /// Position of `id` within [`Vocabulary::targets`].
    pub fn target_index(&self, id: PredicateId) -> Option<usize> {
        self.targets.binary_search(&id).ok()
    }

    pub fn id(&self, name: &str) -> Option<PredicateId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: PredicateId) -> &str {
        &self.predicates[id].name
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub type_id: PredicateId,
}

impl Event {
    pub fn new(time: f64, type_id: PredicateId) -> Self {
        Self { time, type_id }
    }
}

/// A history `X` observed on `[0, horizon]` with the held-out next type `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub horizon: f64,
    pub label: PredicateId,
}

impl EventSequence {
    /// Builds a sequence, sorting events by time (stable).
    pub fn new(mut events: Vec<Event>, horizon: f64, label: PredicateId) -> Self {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Self {
            events,
            horizon,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].time <= w[1].time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub sequences: Vec<EventSequence>,
    pub splits: Vec<Option<Split>>,
}

impl Dataset {
    pub fn new(vocabulary: Vocabulary, sequences: Vec<EventSequence>) -> Self {
        let splits = vec![None; sequences.len()];
        Self {
            vocabulary,
            sequences,
            splits,
        }
    }

    /// Sequences tagged with `split`, in file order.
    pub fn split(&self, split: Split) -> Vec<&EventSequence> {
        self.split_indices(split)
            .into_iter()
            .map(|i| &self.sequences[i])
            .collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum PredicateRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabEntry {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    t: f64,
    #[serde(rename = "type")]
    type_ref: PredicateRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceRecord {
    events: Vec<EventRecord>,
    horizon: f64,
    label: PredicateRef,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    vocabulary: Vec<VocabEntry>,
    targets: Vec<PredicateRef>,
    sequences: Vec<SequenceRecord>,
}

fn resolve(vocab: &Vocabulary, r: &PredicateRef, location: &str) -> Result<PredicateId, DataError> {
    match r {
        PredicateRef::Id(id) if *id < vocab.len() => Ok(*id),
        PredicateRef::Id(id) => Err(DataError::UnknownPredicate {
            name: id.to_string(),
            location: location.to_string(),
        }),
        PredicateRef::Name(name) => vocab.id(name).ok_or_else(|| DataError::UnknownPredicate {
            name: name.clone(),
            location: location.to_string(),
        }),
    }
}

/// Parses a dataset document. Returns the dataset and any warnings raised
/// (currently only re-sorted sequences).
pub fn parse_dataset(text: &str) -> Result<(Dataset, Vec<String>), DataError> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| DataError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut names = Vec::with_capacity(file.vocabulary.len());
    for (pos, entry) in file.vocabulary.iter().enumerate() {
        if entry.id != pos {
            return Err(DataError::InvalidVocabulary {
                location: format!("vocabulary[{pos}]"),
                message: format!("id {} does not match position {pos}", entry.id),
            });
        }
        names.push(entry.name.as_str());
    }
    // Resolve targets by name against a provisional vocabulary first.
    let provisional = Vocabulary::new(&names, &[0]).map_err(|e| match e {
        DataError::InvalidVocabulary { message, .. } => DataError::InvalidVocabulary {
            location: "vocabulary".into(),
            message,
        },
        other => other,
    })?;
    let mut targets = Vec::with_capacity(file.targets.len());
    for (i, t) in file.targets.iter().enumerate() {
        targets.push(resolve(&provisional, t, &format!("targets[{i}]"))?);
    }
    let vocabulary = Vocabulary::new(&names, &targets)?;

    let mut warnings = Vec::new();
    let mut sequences = Vec::with_capacity(file.sequences.len());
    let mut splits = Vec::with_capacity(file.sequences.len());
    for (si, rec) in file.sequences.iter().enumerate() {
        let mut events = Vec::with_capacity(rec.events.len());
        for (ei, ev) in rec.events.iter().enumerate() {
            let location = format!("sequences[{si}].events[{ei}]");
            if ev.t < 0.0 || !ev.t.is_finite() {
                return Err(DataError::NegativeTime { time: ev.t, location });
            }
            events.push(Event::new(ev.t, resolve(&vocabulary, &ev.type_ref, &location)?));
        }
        let location = format!("sequences[{si}].label");
        let label = resolve(&vocabulary, &rec.label, &location)?;
        if !vocabulary.is_target(label) {
            return Err(DataError::LabelNotTarget {
                label: vocabulary.name(label).to_string(),
                location,
            });
        }
        let sorted = events.windows(2).all(|w| w[0].time <= w[1].time);
        let seq = EventSequence::new(events, rec.horizon, label);
        if !sorted {
            let msg = format!("sequences[{si}]: events out of order, re-sorted by time");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if let Some(last) = seq.events.last() {
            if rec.horizon < last.time {
                return Err(DataError::HorizonBeforeLastEvent {
                    horizon: rec.horizon,
                    last: last.time,
                    location: format!("sequences[{si}].horizon"),
                });
            }
        } else if rec.horizon < 0.0 {
            return Err(DataError::NegativeTime {
                time: rec.horizon,
                location: format!("sequences[{si}].horizon"),
            });
        }
        sequences.push(seq);
        splits.push(rec.split);
    }
    Ok((
        Dataset {
            vocabulary,
            sequences,
            splits,
        },
        warnings,
    ))
}

/// Loads a dataset file. Out-of-order events are re-sorted and reported
/// through the `log` facade.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    load_dataset_with_warnings(path).map(|(d, _)| d)
}

pub fn load_dataset_with_warnings(path: impl AsRef<Path>) -> Result<(Dataset, Vec<String>), DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Serializes a dataset; event types and labels are written as ids.
pub fn dataset_to_json(dataset: &Dataset) -> String {
    let file = DatasetFile {
        vocabulary: dataset
            .vocabulary
            .predicates()
            .iter()
            .map(|p| VocabEntry {
                id: p.id,
                name: p.name.clone(),
            })
            .collect(),
        targets: dataset
            .vocabulary
            .targets()
            .iter()
            .map(|&t| PredicateRef::Id(t))
            .collect(),
        sequences: dataset
            .sequences
            .iter()
            .zip(&dataset.splits)
            .map(|(s, split)| SequenceRecord {
                events: s
                    .events
                    .iter()
                    .map(|e| EventRecord {
                        t: e.time,
                        type_ref: PredicateRef::Id(e.type_id),
                    })
                    .collect(),
                horizon: s.horizon,
                label: PredicateRef::Id(s.label),
                split: *split,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, dataset_to_json(dataset))
}

/// Assigns an 80/10/10 train/dev/test split as a pure function of `seed`.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    let n = dataset.sequences.len();
    if n < 10 {
        return Err(DataError::TooFewSequences(n));
    }
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_dev = (n as f64 * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Some(Split::Test); n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        });
    }
    Ok(Dataset {
        splits,
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{
        "vocabulary": [{"id": 0, "name": "A"}, {"id": 1, "name": "B"}, {"id": 2, "name": "C"}],
        "targets": [0],
        "sequences": [{"events": [{"t": 0.2, "type": 1}, {"t": 0.5, "type": 2}], "horizon": 1.0, "label": 0, "split": null}]
    }"#;

    fn synthetic(n: usize) -> Dataset {
        let vocab = Vocabulary::new(&["A", "B"], &[0]).unwrap();
        let seqs = (0..n)
            .map(|i| EventSequence::new(vec![Event::new(i as f64 * 0.1, 1)], 10.0, 0))
            .collect();
        Dataset::new(vocab, seqs)
    }

    #[test]
    fn parses_single_sequence() {
        let (d, warnings) = parse_dataset(ONE).unwrap();
        assert_eq!(d.vocabulary.len(), 3);
        assert_eq!(d.sequences.len(), 1);
        assert_eq!(d.sequences[0].events, vec![Event::new(0.2, 1), Event::new(0.5, 2)]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn resorts_out_of_order_events() {
        let text = ONE.replace(r#"{"t": 0.2, "type": 1}, {"t": 0.5, "type": 2}"#, r#"{"t": 0.5, "type": 2}, {"t": 0.2, "type": 1}"#);
        let (d, warnings) = parse_dataset(&text).unwrap();
        assert_eq!(d.sequences[0].events, vec![Event::new(0.2, 1), Event::new(0.5, 2)]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn names_resolve_like_ids() {
        let text = ONE
            .replace(r#""type": 1"#, r#""type": "B""#)
            .replace(r#""label": 0"#, r#""label": "A""#);
        let (d, _) = parse_dataset(&text).unwrap();
        assert_eq!(d.sequences[0].events[0].type_id, 1);
        assert_eq!(d.sequences[0].label, 0);
    }

    #[test]
    fn distinct_errors() {
        let label = ONE.replace(r#""label": 0"#, r#""label": 1"#);
        let err = parse_dataset(&label).unwrap_err();
        assert!(matches!(err, DataError::LabelNotTarget { .. }));
        assert!(err.to_string().contains("label-not-target"));

        let unknown = ONE.replace(r#""type": 1"#, r#""type": "Z""#);
        assert!(matches!(parse_dataset(&unknown), Err(DataError::UnknownPredicate { .. })));

        let negative = ONE.replace("0.2", "-0.2");
        match parse_dataset(&negative) {
            Err(DataError::NegativeTime { location, .. }) => {
                assert_eq!(location, "sequences[0].events[0]")
            }
            other => panic!("unexpected {other:?}"),
        }

        let malformed = &ONE[..40];
        assert!(matches!(parse_dataset(malformed), Err(DataError::Malformed { .. })));
    }

    #[test]
    fn round_trip() {
        let (d, _) = parse_dataset(ONE).unwrap();
        let (back, _) = parse_dataset(&dataset_to_json(&d)).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn split_fractions() {
        let d = split_dataset(&synthetic(10), 0).unwrap();
        assert_eq!(d.split(Split::Train).len(), 8);
        assert_eq!(d.split(Split::Dev).len(), 1);
        assert_eq!(d.split(Split::Test).len(), 1);

        let d = split_dataset(&synthetic(100), 3).unwrap();
        assert_eq!(d.split(Split::Train).len(), 80);
        assert_eq!(d.split(Split::Dev).len(), 10);
        assert_eq!(d.split(Split::Test).len(), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let base = synthetic(37);
        assert_eq!(split_dataset(&base, 9).unwrap().splits, split_dataset(&base, 9).unwrap().splits);
        assert!(matches!(split_dataset(&synthetic(9), 0), Err(DataError::TooFewSequences(9))));
    }
}
