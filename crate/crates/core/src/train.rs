//! Minibatch training with Adam and AUC-J early stopping.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::ScenarioRecord;
use crate::error::{Error, Result};
use crate::gt::GtConfig;
use crate::loss::LossKind;
use crate::metrics::auc_judd;
use crate::model::{build_model, forward_graph, ModelConfig, NetworkParams};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Mode};
use crate::pipeline::{image_batch, load_frames, predict_eval, target_batch, FrameSample};
use crate::rng::substream;

/// How context labels reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Normal,
    /// No context branch.
    Disabled,
    /// Labels permuted across records before the split.
    Random,
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Normal => "normal",
            ContextMode::Disabled => "none",
            ContextMode::Random => "random",
        })
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ContextMode::Normal),
            "none" => Ok(ContextMode::Disabled),
            "random" => Ok(ContextMode::Random),
            other => Err(Error::Config(format!("unknown context mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub loss: LossKind,
    pub context_mode: ContextMode,
    /// Fraction of records held back for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            epochs_max: 100,
            patience: 5,
            loss: LossKind::EwMse,
            context_mode: ContextMode::Normal,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs_max == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when no validation frame has a defined AUC-J.
    pub val_auc_j: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation AUC-J.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc_j,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.8},{:.6},{:.3}", e.epoch, e.train_loss, e.val_auc_j, e.seconds);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let improved = match self.best {
            None => true,
            Some((_, b)) => value > b || (b.is_nan() && !value.is_nan()),
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
}

/// Seeded record-level split into (train, validation).
pub fn split_records(records: &[ScenarioRecord], val_fraction: f64, seed: u64) -> Result<(Vec<ScenarioRecord>, Vec<ScenarioRecord>)> {
    if records.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 records to split, got {}", records.len())));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut substream(seed, "split"));
    let n_val = ((records.len() as f64 * val_fraction).round() as usize).clamp(1, records.len() - 1);
    let val = order[..n_val].iter().map(|&i| records[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

/// Permutes context labels across records.
pub fn shuffle_contexts(records: &mut [ScenarioRecord], seed: u64) {
    let mut labels: Vec<_> = records.iter().map(|r| r.context).collect();
    labels.shuffle(&mut substream(seed, "random-context"));
    for (r, c) in records.iter_mut().zip(labels) {
        r.context = c;
    }
}

fn contexts_of(frames: &[&FrameSample], enabled: bool) -> Option<Vec<usize>> {
    enabled.then(|| frames.iter().map(|f| f.context.category_index()).collect())
}

/// Mean AUC-J of eval-mode predictions over frames where it is defined.
pub fn validation_auc_j(net: &NetworkParams, frames: &[FrameSample]) -> Result<f64> {
    let refs: Vec<&FrameSample> = frames.iter().collect();
    let ctx = contexts_of(&refs, net.config.context_enabled);
    let preds = predict_eval(net, &refs, ctx.as_deref())?;
    let scores: Vec<f64> = preds
        .par_iter()
        .zip(frames)
        .filter_map(|(p, f)| auc_judd(p, &f.fixations).ok())
        .collect();
    if scores.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains on `records` (the training subjects). `on_epoch` sees every
/// finished epoch.
pub fn train(
    records: &[ScenarioRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    gt: &GtConfig,
    preprocessed: bool,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Dataset("no training records".into()));
    }
    let mut records = records.to_vec();
    if cfg.context_mode == ContextMode::Random {
        shuffle_contexts(&mut records, cfg.seed);
    }
    let (train_recs, val_recs) = split_records(&records, cfg.val_fraction, cfg.seed)?;
    let size = model_cfg.input_size;
    let train_frames = load_frames(&train_recs, size, gt, preprocessed)?;
    let val_frames = load_frames(&val_recs, size, gt, preprocessed)?;
    train_on_frames(&train_frames, &val_frames, model_cfg, cfg, on_epoch)
}

/// The loop proper, on frames already in memory.
pub fn train_on_frames(
    train_frames: &[FrameSample],
    val_frames: &[FrameSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if (cfg.context_mode == ContextMode::Disabled) == model_cfg.context_enabled {
        return Err(Error::Config(format!(
            "context mode `{}` does not match a model with context {}",
            cfg.context_mode,
            if model_cfg.context_enabled { "enabled" } else { "disabled" }
        )));
    }
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(Error::Dataset("training and validation sets need frames with fixations".into()));
    }
    let size = model_cfg.input_size;
    let mut net = build_model(model_cfg)?;
    let mut adam = AdamState::new(&net.store, AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = net.clone();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs_max {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("epoch-{epoch}")));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            // a singleton tail would give batch norm a zero variance
            if idx.len() == 1 && cfg.batch_size > 1 {
                continue;
            }
            let batch: Vec<&FrameSample> = idx.iter().map(|&i| &train_frames[i]).collect();
            let ctx = contexts_of(&batch, model_cfg.context_enabled);
            let rngs = (0..batch.len())
                .map(|i| substream(cfg.seed, &format!("dropout-{epoch}-{b}-{i}")))
                .collect();
            let mut graph = Graph::new(&net.store, Mode::Train, rngs);
            let x = graph.input(image_batch(&batch, size))?;
            let nodes = forward_graph(&mut graph, &net, x, ctx.as_deref())?;
            let (loss, grad) = cfg.loss.evaluate(graph.value(nodes.output), &target_batch(&batch, size))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, msg: format!("loss {loss} at batch {b}") });
            }
            let grads = graph.backward(nodes.output, grad)?;
            let moments = nodes.context_moments(&graph);
            drop(graph);
            if !grads.max_abs().is_finite() {
                return Err(Error::Diverged { epoch, msg: format!("non-finite gradient at batch {b}") });
            }
            adam_step(&mut net.store, &grads, &mut adam)?;
            if let Some(m) = &moments {
                net.update_running_stats(m);
            }
            net.round_to_f32();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_auc_j = validation_auc_j(&net, val_frames)?;
        let record = EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_auc_j,
            seconds: start.elapsed().as_secs_f64(),
        };
        history.epochs.push(record);
        on_epoch(&record);
        match stopper.observe(epoch, val_auc_j) {
            Verdict::Improved => best = net.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, best_auc) = stopper.best().expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint { params: best, epoch: best_epoch as u32, best_val_auc_j: best_auc },
        history,
    })
}
