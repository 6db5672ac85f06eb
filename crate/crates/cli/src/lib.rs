//! The `logictree` command line: dataset generation and splitting,
//! training, evaluation and tree sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use logictree::data::{load_dataset, save_dataset, split_dataset, Dataset, DataError, EventSequence, Split};
use logictree::em::{train, write_atomic, TrainConfig, TrainError, TrainOptions, TrainedModel};
use logictree::eval::{evaluate, records_to_csv, sequence_rng};
use logictree::policy::{tree_logprob_with, Condition, Exploration};
use logictree::remote::{RemoteConfig, RemotePolicy};
use logictree::synthetic::{generate_dataset, SynthError, TruthModel};
use logictree::tree::{to_dot, LogicTree, PathStat, RulePath};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "logictree", version, about = "Learn latent logic-tree explanations of event sequences")]
pub struct Cli {
    /// Random seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sampling and evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labeled dataset from a ground-truth model.
    Gen(GenArgs),
    /// Assign an 80/10/10 train/dev/test split.
    Split(SplitArgs),
    /// Train a model with amortized EM.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Sample explanation trees for one sequence.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Ground-truth model (JSON); the built-in five-type model when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 200)]
    pub n_sequences: usize,
    /// Overrides the model's horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Also write a train/dev/test split.
    #[arg(long)]
    pub split: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration, TOML or JSON by extension.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from `<out-dir>/last.json`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_policy: Option<f64>,
    #[arg(long)]
    pub lr_logic: Option<f64>,
    #[arg(long)]
    pub alternate_every: Option<u64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 8)]
    pub n_samples: usize,
    /// Repeat evaluation with this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Report file; printed to stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Per-sequence predictions of the first seed as CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TreeFormat {
    Dot,
    Json,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding the sequence.
    #[arg(long, conflicts_with = "sequence_file")]
    pub dataset: Option<PathBuf>,
    /// Index of the sequence within `--dataset`.
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    /// A single-sequence JSON file (`{"events": [...], "horizon": h, "label": ...}`).
    #[arg(long)]
    pub sequence_file: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = TreeFormat::Json)]
    pub format: TreeFormat,
    /// Leave the label slot of the sampler's condition empty.
    #[arg(long)]
    pub unlabeled: bool,
    /// Also score each tree under the remote prior named by the environment.
    #[arg(long)]
    pub remote_prior: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Model(_) | SynthError::File { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NoTrainingData | TrainError::Checkpoint { .. } => CliError::Data(e.to_string()),
            TrainError::Io { .. } => CliError::Other(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::Other(e.to_string()))
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Parses a training configuration; `.toml` files as TOML, anything else
/// as JSON. Missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Written to the output directory before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub config: TrainConfig,
    pub seed: u64,
    /// SHA-256 over the dataset bytes and the effective configuration.
    pub input_hash: String,
    pub dataset: PathBuf,
    pub dataset_split_assigned: bool,
    pub resumed_from_epoch: Option<usize>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_at: String,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, seed.unwrap_or(0)),
        Command::Split(a) => cmd_split(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0)),
        Command::Sample(a) => cmd_sample(a, seed.unwrap_or(0)),
    }
}

pub fn cmd_gen(args: GenArgs, seed: u64) -> Result<(), CliError> {
    let model = match &args.model {
        Some(p) => {
            require_file(p, "model file")?;
            TruthModel::load(p)?
        }
        None => TruthModel::planted_five(),
    };
    if let Some(h) = args.horizon {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CliError::Usage(format!("--horizon must be positive, got {h}")));
        }
    }
    let mut dataset = generate_dataset(&model, args.n_sequences, args.horizon, seed)?;
    if args.split {
        dataset = split_dataset(&dataset, seed)?;
    }
    let avg = dataset.sequences.iter().map(|s| s.events.len()).sum::<usize>() as f64
        / dataset.sequences.len().max(1) as f64;
    log::info!("generated {} sequences, average length {avg:.2}", dataset.sequences.len());
    write_file(&args.out, logictree::data::dataset_to_json(&dataset).as_bytes())
}

pub fn cmd_split(args: SplitArgs, seed: u64) -> Result<(), CliError> {
    require_file(&args.dataset, "dataset")?;
    let dataset = split_dataset(&load_dataset(&args.dataset)?, seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_dataset(&dataset, &args.out).map_err(|e| io_error(&args.out, e))
}

fn has_splits(d: &Dataset) -> bool {
    d.splits.iter().any(Option::is_some)
}

pub fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    require_file(&args.dataset, "dataset")?;
    let mut config = match &args.config {
        Some(p) => {
            require_file(p, "config file")?;
            load_config(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    macro_rules! apply {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { config.$field = v; })*};
    }
    apply!(epochs, batch_size, lr_policy, lr_logic, alternate_every, max_depth, max_width);
    config.validate()?;

    let bytes = fs::read(&args.dataset).map_err(|e| io_error(&args.dataset, e))?;
    let mut dataset = load_dataset(&args.dataset)?;
    let assigned = !has_splits(&dataset);
    if assigned {
        log::warn!("dataset has no split; assigning one with seed {}", config.seed);
        dataset = split_dataset(&dataset, config.seed)?;
    }

    let last_path = args.out_dir.join("last.json");
    let resume = if args.resume {
        if !last_path.is_file() {
            return Err(CliError::Usage(format!("nothing to resume: {} not found", last_path.display())));
        }
        Some(TrainedModel::load(&last_path)?)
    } else {
        None
    };
    let resumed_from = resume.as_ref().map(|m| m.state.epochs_done);

    fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let config_json = serde_json::to_vec(&config).expect("config serializes");
    let outputs: BTreeMap<String, PathBuf> = [
        ("best", "best.json"),
        ("last", "last.json"),
        ("epochs", "epochs.csv"),
        ("subtb", "subtb.csv"),
        ("mstep", "mstep.csv"),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), args.out_dir.join(f)))
    .collect();
    let manifest = RunManifest {
        command: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        input_hash: sha256_hex(&[&bytes, &config_json]),
        config: config.clone(),
        dataset: args.dataset.clone(),
        dataset_split_assigned: assigned,
        resumed_from_epoch: resumed_from,
        outputs,
        started_at: Utc::now().to_rfc3339(),
    };
    let name = match resumed_from {
        None => "manifest.json".to_string(),
        Some(e) => format!("manifest.resume-{e}.json"),
    };
    write_file(
        &args.out_dir.join(name),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;

    let model = train(
        &dataset,
        &config,
        TrainOptions {
            out_dir: Some(args.out_dir.clone()),
            resume,
        },
    )?;
    if let Some(e) = model.history.epochs.last() {
        log::info!(
            "finished epoch {} at step {}; returned epoch {:?}",
            e.epoch,
            e.step,
            model.history.best_epoch
        );
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs, seed: u64) -> Result<(), CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.dataset, "dataset")?;
    if args.n_samples == 0 || args.repeats == 0 {
        return Err(CliError::Usage("--n-samples and --repeats must be positive".into()));
    }
    let model = TrainedModel::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    if dataset.vocabulary != model.vocabulary {
        return Err(CliError::Data("dataset vocabulary differs from the checkpoint".into()));
    }
    let seqs: Vec<(usize, &EventSequence)> = dataset
        .split_indices(args.split)
        .into_iter()
        .map(|i| (i, &dataset.sequences[i]))
        .collect();
    if seqs.is_empty() {
        return Err(CliError::Data(format!("split {} is empty", args.split)));
    }
    let train_labels: Vec<usize> = dataset.split(Split::Train).iter().map(|s| s.label).collect();
    let seeds: Vec<u64> = (0..args.repeats).map(|k| seed.wrapping_add(k)).collect();
    let tlpp = model.tlpp();
    let (report, records) = evaluate(
        model.view(&tlpp),
        &args.split.to_string(),
        &seqs,
        &train_labels,
        args.n_samples,
        &seeds,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    if let Some(p) = &args.records {
        write_file(p, records_to_csv(&records, &model.vocabulary).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SequenceFile {
    events: Vec<SequenceEvent>,
    horizon: f64,
    label: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct SequenceEvent {
    t: f64,
    #[serde(rename = "type")]
    type_ref: serde_json::Value,
}

/// Reads a lone sequence by wrapping it in a dataset document with the
/// checkpoint's vocabulary, so it gets the same validation.
fn load_sequence_file(path: &Path, model: &TrainedModel) -> Result<EventSequence, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let seq: SequenceFile = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let vocab = &model.vocabulary;
    let doc = serde_json::json!({
        "vocabulary": vocab.predicates().iter().map(|p| serde_json::json!({"id": p.id, "name": p.name})).collect::<Vec<_>>(),
        "targets": vocab.targets(),
        "sequences": [{
            "events": seq.events.iter().map(|e| serde_json::json!({"t": e.t, "type": e.type_ref})).collect::<Vec<_>>(),
            "horizon": seq.horizon,
            "label": seq.label,
        }],
    });
    let (d, _) = logictree::data::parse_dataset(&doc.to_string())?;
    Ok(d.sequences.into_iter().next().expect("one sequence"))
}

/// Fraction of `trees` containing each path.
pub fn path_frequencies(trees: &[LogicTree]) -> BTreeMap<RulePath, f64> {
    let mut freq = BTreeMap::new();
    for t in trees {
        for p in t.paths() {
            *freq.entry(p).or_insert(0.0) += 1.0 / trees.len() as f64;
        }
    }
    freq
}

pub fn cmd_sample(args: SampleArgs, seed: u64) -> Result<(), CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    let model = TrainedModel::load(&args.checkpoint)?;
    let (seq, seq_id) = match (&args.dataset, &args.sequence_file) {
        (Some(d), None) => {
            require_file(d, "dataset")?;
            let dataset = load_dataset(d)?;
            if dataset.vocabulary != model.vocabulary {
                return Err(CliError::Data("dataset vocabulary differs from the checkpoint".into()));
            }
            let seq = dataset.sequences.get(args.sequence).cloned().ok_or_else(|| {
                CliError::Usage(format!(
                    "sequence {} out of range ({} sequences)",
                    args.sequence,
                    dataset.sequences.len()
                ))
            })?;
            (seq, args.sequence)
        }
        (None, Some(f)) => {
            require_file(f, "sequence file")?;
            (load_sequence_file(f, &model)?, 0)
        }
        _ => return Err(CliError::Usage("give exactly one of --dataset or --sequence-file".into())),
    };
    if args.n == 0 {
        return Err(CliError::Usage("-n must be positive".into()));
    }
    let remote = if args.remote_prior {
        let cfg = RemoteConfig::from_env().ok_or_else(|| {
            CliError::Usage(format!("--remote-prior needs {}", logictree::remote::ENDPOINT_VAR))
        })?;
        Some(RemotePolicy::new(cfg, model.vocabulary.clone(), model.phi.limits).map_err(|e| CliError::Usage(e.to_string()))?)
    } else {
        None
    };

    let vocab = &model.vocabulary;
    let label = (!args.unlabeled).then_some(seq.label);
    let cond = Condition::new(&seq, vocab, label);
    let mut rng = sequence_rng(seed, seq_id);
    let trees: Vec<LogicTree> = (0..args.n)
        .map(|_| model.theta.sample_tree(vocab.targets(), Some(&cond), &mut rng, &Exploration::ON_POLICY))
        .collect();
    let freq = path_frequencies(&trees);

    fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let mut tree_docs = Vec::with_capacity(trees.len());
    for (i, t) in trees.iter().enumerate() {
        let mut doc = t.to_json(vocab);
        doc["index"] = serde_json::json!(i);
        doc["log_q"] = serde_json::json!(model.theta.tree_logprob(t, Some(&cond)).ok());
        doc["log_prior"] = serde_json::json!(model.phi.tree_logprob(t, None).ok());
        if let Some(r) = &remote {
            let lp = tree_logprob_with(r, t, None).map_err(|e| CliError::Other(e.to_string()))?;
            doc["log_remote_prior"] = serde_json::json!(lp);
        }
        if args.format == TreeFormat::Dot {
            let stats: Vec<PathStat> = t
                .paths()
                .into_iter()
                .map(|p| PathStat {
                    weight: model.weights.weight(&p),
                    path: p,
                    frequency: 1.0,
                })
                .collect();
            write_file(&args.out_dir.join(format!("tree_{i:04}.dot")), to_dot(vocab, &stats).as_bytes())?;
        }
        tree_docs.push(doc);
    }
    write_file(
        &args.out_dir.join("trees.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "sequence": seq_id,
            "seed": seed,
            "labeled": label.is_some(),
            "trees": tree_docs,
        }))
        .expect("trees serialize")
        .as_bytes(),
    )?;

    let stats: Vec<PathStat> = freq
        .iter()
        .map(|(p, &f)| PathStat {
            path: p.clone(),
            frequency: f,
            weight: model.weights.weight(p),
        })
        .collect();
    match args.format {
        TreeFormat::Dot => write_file(&args.out_dir.join("summary.dot"), to_dot(vocab, &stats).as_bytes()),
        TreeFormat::Json => {
            let rows: Vec<serde_json::Value> = stats
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "path": s.path.0.iter().map(|&i| vocab.name(i)).collect::<Vec<_>>(),
                        "frequency": s.frequency,
                        "weight": s.weight,
                    })
                })
                .collect();
            write_file(
                &args.out_dir.join("summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({ "n": args.n, "paths": rows }))
                    .expect("summary serializes")
                    .as_bytes(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_formats_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        fs::write(&t, "epochs = 3\noptimizer = \"sgd\"\n[exploration]\nepsilon_start = 0.2\n").unwrap();
        fs::write(&j, r#"{"epochs": 3, "optimizer": "sgd", "exploration": {"epsilon_start": 0.2}}"#).unwrap();
        let a = load_config(&t).unwrap();
        assert_eq!(a, load_config(&j).unwrap());
        assert_eq!(a.epochs, 3);
        assert_eq!(a.batch_size, TrainConfig::default().batch_size);
        fs::write(&j, r#"{"epoch": 3}"#).unwrap();
        assert_eq!(load_config(&j).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn frequencies_count_trees_not_occurrences() {
        let a = LogicTree::from_paths(0, &[RulePath(vec![0, 1]), RulePath(vec![0, 2])]);
        let b = LogicTree::from_paths(0, &[RulePath(vec![0, 1])]);
        let f = path_frequencies(&[a, b]);
        assert_eq!(f[&RulePath(vec![0, 1])], 1.0);
        assert_eq!(f[&RulePath(vec![0, 2])], 0.5);
    }

    #[test]
    fn exit_codes() {
        let diverged: CliError = TrainError::Diverged {
            step: 3,
            diagnostics: String::new(),
        }
        .into();
        assert_eq!(diverged.exit_code(), EXIT_DIVERGED);
        assert_eq!(CliError::from(TrainError::NoTrainingData).exit_code(), EXIT_DATA);
        assert_eq!(CliError::from(TrainError::Config("x".into())).exit_code(), EXIT_USAGE);
    }
}
