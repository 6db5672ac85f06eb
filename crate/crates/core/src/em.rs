//! The amortized EM loop: sampler updates (E-steps) alternating with
//! updates of the rule weights and the prior policy (M-steps).

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EventSequence, Split, Vocabulary};
use crate::eval::{self, ModelRef};
use crate::gflownet::{
    estep_update, EStepConfig, EStepItem, EStepState, ExplorationSchedule, OptimizerConfig, OptimizerKind,
    PosteriorReward, WeightOptimizer, DenseOptimizer,
};
use crate::policy::{Condition, Exploration, LinearPolicy, PolicyParams, MAX_WIDTH};
use crate::tlpp::{CountTransform, RuleWeights, Tlpp};
use crate::tree::TreeLimits;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has no training sequences")]
    NoTrainingData,
    #[error("training diverged at step {step}: {diagnostics}")]
    Diverged { step: u64, diagnostics: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid checkpoint: {message}")]
    Checkpoint { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size of the sampler and the prior.
    pub lr_policy: f64,
    /// Step size of the rule weights and base rates.
    pub lr_logic: f64,
    /// An M-step runs whenever the moving-average SubTB loss drops below
    /// this threshold.
    pub alpha: f64,
    /// An M-step also runs on every step divisible by this.
    pub alternate_every: u64,
    pub max_depth: usize,
    pub max_width: usize,
    pub allow_self_loops: bool,
    pub ema_beta: f64,
    pub exploration: ExplorationSchedule,
    pub optimizer: OptimizerKind,
    /// Step size at the last scheduled step as a fraction of the initial
    /// one, for both optimizers.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Trees sampled per sequence in an M-step.
    pub m_step_samples: usize,
    /// Explanations sampled per sequence when predicting.
    pub eval_samples: usize,
    pub count_transform: CountTransform,
    pub selection: Selection,
}

/// Which epoch's model [`train`] returns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest dev error rate, then lowest dev mean rank; later epochs win
    /// exact ties.
    #[default]
    BestDev,
    Last,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr_policy: 5e-4,
            lr_logic: 1e-3,
            alpha: 1.0,
            alternate_every: 1,
            max_depth: 3,
            max_width: 5,
            allow_self_loops: false,
            ema_beta: 0.9,
            exploration: ExplorationSchedule::default(),
            optimizer: OptimizerKind::Rmsprop,
            final_lr_fraction: 1.0,
            seed: 0,
            m_step_samples: 4,
            eval_samples: 8,
            count_transform: CountTransform::Identity,
            selection: Selection::BestDev,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.lr_policy) || !rate_ok(self.lr_logic) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.final_lr_fraction.is_finite() && self.final_lr_fraction >= 0.0) {
            return bad("final_lr_fraction must be non-negative");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if !(1..=MAX_WIDTH).contains(&self.max_width) {
            return bad(&format!("max_width must be in 1..={MAX_WIDTH}"));
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.batch_size == 0 || self.alternate_every == 0 || self.m_step_samples == 0 || self.eval_samples == 0 {
            return bad("batch_size, alternate_every, m_step_samples and eval_samples must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta must be in [0, 1)");
        }
        let e = &self.exploration;
        if !(0.0..=1.0).contains(&e.epsilon_start) || !(0.0..=1.0).contains(&e.epsilon_end) {
            return bad("exploration epsilon must be in [0, 1]");
        }
        if !(e.temperature > 0.0) {
            return bad("exploration temperature must be positive");
        }
        Ok(())
    }

    pub fn limits(&self) -> TreeLimits {
        TreeLimits {
            max_depth: self.max_depth,
            max_width: self.max_width,
            allow_self_loops: self.allow_self_loops,
        }
    }

    fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr,
            final_lr_fraction: self.final_lr_fraction,
            ..OptimizerConfig::default()
        }
    }

    pub fn estep_config(&self, total_steps: u64) -> EStepConfig {
        EStepConfig {
            optimizer: self.optimizer_config(self.lr_policy),
            ema_beta: self.ema_beta,
            exploration: ExplorationSchedule {
                decay_steps: self.exploration.decay_steps.or(Some(total_steps)),
                ..self.exploration
            },
            total_steps: Some(total_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub ema_subtb: Option<f64>,
    pub dev_er: Option<f64>,
    pub dev_mr: Option<f64>,
    pub dev_nll: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub m_steps: u64,
}

/// Optimizer state carried across resumed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epochs_done: usize,
    pub estep: EStepState,
    pub weight_optimizer: WeightOptimizer,
    pub prior_optimizer: DenseOptimizer,
}

/// A trained model bundle; the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub vocabulary: Vocabulary,
    pub config: TrainConfig,
    pub theta: LinearPolicy,
    pub phi: LinearPolicy,
    pub weights: RuleWeights,
    pub history: TrainingHistory,
    pub state: TrainerState,
}

impl TrainedModel {
    /// Fresh model: zero prior, sampler copied from it, zero weights.
    pub fn init(vocabulary: &Vocabulary, config: &TrainConfig) -> Self {
        let phi = LinearPolicy::new(vocabulary, config.limits(), false);
        let theta = LinearPolicy::conditioned_from(&phi);
        let est = EStepState::new(theta.clone(), &config.estep_config(0));
        Self {
            vocabulary: vocabulary.clone(),
            config: config.clone(),
            state: TrainerState {
                epochs_done: 0,
                estep: est,
                weight_optimizer: WeightOptimizer::new(config.optimizer_config(config.lr_logic), vocabulary.len()),
                prior_optimizer: DenseOptimizer::new(config.optimizer_config(config.lr_policy), phi.params.data.len()),
            },
            theta,
            phi,
            weights: RuleWeights::zeros(vocabulary.len()),
            history: TrainingHistory::default(),
        }
    }

    pub fn tlpp(&self) -> Tlpp {
        Tlpp::with_transform(&self.vocabulary, self.config.count_transform)
    }

    pub fn view<'a>(&'a self, tlpp: &'a Tlpp) -> ModelRef<'a> {
        ModelRef {
            vocabulary: &self.vocabulary,
            theta: &self.theta,
            weights: &self.weights,
            tlpp,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization cannot fail")
    }

    /// Writes to a temporary sibling file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// M-step

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepStats {
    pub step: u64,
    /// Mean of `log p(X|R) + log p(Y|X,R) + log p_φ(R)` over sampled trees,
    /// before the update.
    pub objective: f64,
    pub mean_nll: f64,
    pub mean_log_pred: f64,
    pub mean_log_prior: f64,
}

/// Gradients of the Monte Carlo M-step objective.
#[derive(Debug, Clone)]
pub struct MStepGradient {
    pub weights: RuleWeights,
    pub phi: PolicyParams,
    pub stats: MStepStats,
}

/// Samples `m_step_samples` trees per sequence from `theta` and returns
/// the ascent gradient of the mean objective over `(w, φ)`.
pub fn m_step_gradient<R: Rng + ?Sized>(
    batch: &[&EventSequence],
    vocab: &Vocabulary,
    tlpp: &Tlpp,
    theta: &LinearPolicy,
    weights: &RuleWeights,
    phi: &LinearPolicy,
    m_step_samples: usize,
    rng: &mut R,
) -> MStepGradient {
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let n = (batch.len() * m_step_samples).max(1) as f64;
    let parts: Vec<(RuleWeights, PolicyParams, [f64; 3])> = batch
        .par_iter()
        .zip(seeds)
        .map(|(seq, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cond = Condition::new(seq, vocab, Some(seq.label));
            let mut gw = RuleWeights::zeros(vocab.len());
            let mut gphi = phi.zero_grad();
            let mut sums = [0.0; 3];
            for _ in 0..m_step_samples {
                let tree = theta.sample_tree(vocab.targets(), Some(&cond), &mut rng, &Exploration::ON_POLICY);
                let paths = tree.paths();
                let (nll, g_nll) = tlpp.nll_and_grad(seq, weights, &paths);
                let (lp, g_pred) = tlpp.log_predict_and_grad(seq, weights, &paths, seq.label);
                gw.add_scaled(&g_nll, -1.0 / n);
                gw.add_scaled(&g_pred, 1.0 / n);
                let lprior = phi
                    .accumulate_tree_grad(&tree, None, 1.0 / n, &mut gphi)
                    .expect("sampler respects the prior's limits");
                sums[0] += nll;
                sums[1] += lp;
                sums[2] += lprior;
            }
            (gw, gphi, sums)
        })
        .collect();
    let mut gw = RuleWeights::zeros(vocab.len());
    let mut gphi = phi.zero_grad();
    let mut sums = [0.0; 3];
    for (w, p, s) in &parts {
        gw.add_scaled(w, 1.0);
        gphi.add_scaled(p, 1.0);
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b / n;
        }
    }
    MStepGradient {
        weights: gw,
        phi: gphi,
        stats: MStepStats {
            step: 0,
            objective: -sums[0] + sums[1] + sums[2],
            mean_nll: sums[0],
            mean_log_pred: sums[1],
            mean_log_prior: sums[2],
        },
    }
}

/// One M-step: ascends the Monte Carlo objective in `(w, φ)`.
#[allow(clippy::too_many_arguments)]
pub fn m_step<R: Rng + ?Sized>(
    batch: &[&EventSequence],
    vocab: &Vocabulary,
    tlpp: &Tlpp,
    theta: &LinearPolicy,
    weights: &mut RuleWeights,
    phi: &mut LinearPolicy,
    weight_optimizer: &mut WeightOptimizer,
    prior_optimizer: &mut DenseOptimizer,
    lr_logic: f64,
    lr_prior: f64,
    m_step_samples: usize,
    rng: &mut R,
) -> MStepStats {
    let g = m_step_gradient(batch, vocab, tlpp, theta, weights, phi, m_step_samples, rng);
    weight_optimizer.ascend(weights, &g.weights, lr_logic);
    prior_optimizer.ascend(&mut phi.params.data, &g.phi.data, lr_prior);
    g.stats
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for logs and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this model instead of a fresh one.
    pub resume: Option<TrainedModel>,
}

struct Logs {
    subtb: Option<File>,
    mstep: Option<File>,
    epochs: Option<File>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self, TrainError> {
        let Some(dir) = dir else {
            return Ok(Self {
                subtb: None,
                mstep: None,
                epochs: None,
            });
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str, header: &str| -> Result<Option<File>, TrainError> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .truncate(false)
                .open(&path)
                .map_err(io_err(&path))?;
            if fresh {
                f.set_len(0).map_err(io_err(&path))?;
                writeln!(f, "{header}").map_err(io_err(&path))?;
            }
            Ok(Some(f))
        };
        Ok(Self {
            subtb: open("subtb.csv", "step,ema_subtb,batch_mean_log_reward,trees_sampled,mean_tree_size")?,
            mstep: open("mstep.csv", "step,objective,mean_nll,mean_log_pred,mean_log_prior")?,
            epochs: open("epochs.csv", "epoch,step,ema_subtb,dev_er,dev_mr,dev_nll")?,
        })
    }
}

fn log_line(file: &mut Option<File>, line: String) {
    if let Some(f) = file {
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("log write failed: {e}");
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Stream for epoch `epoch`, so resumed runs draw the same batches.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn dev_metrics(model: &TrainedModel, tlpp: &Tlpp, dataset: &Dataset) -> (Option<f64>, Option<f64>, Option<f64>) {
    let dev: Vec<(usize, &EventSequence)> = dataset
        .split_indices(Split::Dev)
        .into_iter()
        .map(|i| (i, &dataset.sequences[i]))
        .collect();
    if dev.is_empty() {
        return (None, None, None);
    }
    let records = eval::predict_all(model.view(tlpp), &dev, model.config.eval_samples, model.config.seed);
    (
        eval::error_rate(&records).ok(),
        eval::mean_rank(&records).ok(),
        eval::mean_nll(&records).ok(),
    )
}

fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    let key = |r: &EpochRecord| (r.dev_er.unwrap_or(f64::INFINITY), r.dev_mr.unwrap_or(f64::INFINITY));
    let (ka, kb) = (key(a), key(b));
    ka.0 < kb.0 || (ka.0 == kb.0 && ka.1 <= kb.1)
}

/// Runs `config.epochs` epochs over the train split and returns the model
/// from the epoch with the best dev error rate (mean rank breaks ties).
/// Without a dev split the last epoch is returned.
pub fn train(dataset: &Dataset, config: &TrainConfig, options: TrainOptions) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let resumed = options.resume.is_some();
    let mut model = match options.resume {
        Some(mut m) => {
            if m.vocabulary != dataset.vocabulary {
                return Err(TrainError::Config("checkpoint vocabulary differs from the dataset".into()));
            }
            if m.config.limits() != config.limits() {
                return Err(TrainError::Config("checkpoint tree limits differ from the configuration".into()));
            }
            m.config = config.clone();
            m
        }
        None => TrainedModel::init(&dataset.vocabulary, config),
    };
    let out_dir = options.out_dir.as_deref();
    let mut logs = Logs::open(out_dir, resumed)?;
    let tlpp = model.tlpp();
    let vocab = dataset.vocabulary.clone();
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let est_config = config.estep_config(total_steps);
    model.state.estep.optimizer.config = est_config.optimizer;
    model.state.weight_optimizer.config = config.optimizer_config(config.lr_logic);
    model.state.prior_optimizer.config = config.optimizer_config(config.lr_policy);

    let mut best: Option<TrainedModel> = None;
    if resumed {
        best = out_dir
            .map(|d| d.join("best.json"))
            .filter(|p| p.exists())
            .map(TrainedModel::load)
            .transpose()?;
    }

    for epoch in model.state.epochs_done..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &dataset.sequences[i]).collect();
            let rewards: Vec<PosteriorReward> = batch
                .iter()
                .map(|seq| PosteriorReward {
                    tlpp: &tlpp,
                    sequence: seq,
                    label: seq.label,
                    weights: &model.weights,
                    prior: &model.phi,
                })
                .collect();
            let items: Vec<EStepItem> = batch
                .iter()
                .zip(&rewards)
                .map(|(seq, r)| EStepItem {
                    roots: vocab.targets().to_vec(),
                    condition: Some(Condition::new(seq, &vocab, Some(seq.label))),
                    reward: r,
                })
                .collect();
            let stats = estep_update(&mut model.state.estep, &items, &est_config, &mut rng);
            drop(items);
            drop(rewards);
            let step = stats.step;
            log_line(
                &mut logs.subtb,
                format!(
                    "{},{},{},{},{}",
                    step, stats.ema, stats.mean_log_reward, stats.trees_sampled, stats.mean_tree_size
                ),
            );
            if !stats.ema.is_finite() || !model.state.estep.policy.params.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    diagnostics: format!(
                        "ema_subtb={} batch_loss={} mean_log_reward={}",
                        stats.ema, stats.batch_loss, stats.mean_log_reward
                    ),
                });
            }
            if stats.ema < config.alpha || step % config.alternate_every == 0 {
                let lr_scale = est_config.optimizer.schedule_factor(step - 1, Some(total_steps));
                let theta = model.state.estep.policy.clone();
                let mut ms = m_step(
                    &batch,
                    &vocab,
                    &tlpp,
                    &theta,
                    &mut model.weights,
                    &mut model.phi,
                    &mut model.state.weight_optimizer,
                    &mut model.state.prior_optimizer,
                    config.lr_logic * lr_scale,
                    config.lr_policy * lr_scale,
                    config.m_step_samples,
                    &mut rng,
                );
                ms.step = step;
                model.history.m_steps += 1;
                log_line(
                    &mut logs.mstep,
                    format!("{},{},{},{},{}", step, ms.objective, ms.mean_nll, ms.mean_log_pred, ms.mean_log_prior),
                );
                if !model.weights.is_finite() || !model.phi.params.is_finite() {
                    return Err(TrainError::Diverged {
                        step,
                        diagnostics: format!("non-finite rule weights or prior after M-step (objective {})", ms.objective),
                    });
                }
            }
        }
        model.theta = model.state.estep.policy.clone();
        model.state.epochs_done = epoch + 1;
        let (dev_er, dev_mr, dev_nll) = dev_metrics(&model, &tlpp, dataset);
        let record = EpochRecord {
            epoch: epoch + 1,
            step: model.state.estep.step,
            ema_subtb: model.state.estep.ema,
            dev_er,
            dev_mr,
            dev_nll,
        };
        log::info!(
            "epoch {} step {} ema_subtb {} dev_er {} dev_mr {}",
            record.epoch,
            record.step,
            fmt_opt(record.ema_subtb),
            fmt_opt(dev_er),
            fmt_opt(dev_mr)
        );
        log_line(
            &mut logs.epochs,
            format!(
                "{},{},{},{},{},{}",
                record.epoch,
                record.step,
                fmt_opt(record.ema_subtb),
                fmt_opt(dev_er),
                fmt_opt(dev_mr),
                fmt_opt(dev_nll)
            ),
        );
        model.history.epochs.push(record.clone());
        let improved = match &best {
            None => true,
            Some(b) => match b.history.epochs.last() {
                Some(br) => config.selection == Selection::Last || dev_er.is_none() || better(&record, br),
                None => true,
            },
        };
        if improved {
            model.history.best_epoch = Some(record.epoch);
            best = Some(model.clone());
            if let Some(dir) = out_dir {
                model.save(dir.join("best.json"))?;
            }
        }
        if let Some(dir) = out_dir {
            model.save(dir.join("last.json"))?;
        }
    }

    match best {
        Some(mut b) => {
            b.history = model.history.clone();
            Ok(b)
        }
        None => Ok(model),
    }
}
