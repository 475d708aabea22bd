//! Mini-batch training with a step learning-rate schedule, loss-based early
//! stopping, subject-disjoint splits and parallel committee training.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::ensemble::{ExpertCommittee, ExpertKey};
use crate::error::{Error, Result};
use crate::expert::{ExpertConfig, ExpertNetwork};
use crate::graph::{build_graph, JointLayout};
use crate::metrics::{weighted_f1, ConfusionMatrix};
use crate::model::Classifier;
use crate::tensor::{argmax, write_checkpoint, Adam, AdamConfig, Checkpoint, Tape};

/// Batch size used for evaluation passes; it does not affect results.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// Epochs without validation-loss improvement before stopping;
    /// `None` trains for the full epoch budget.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            base_lr: 0.1,
            lr_decay_epochs: vec![80, 160, 180],
            lr_decay_factor: 0.1,
            weight_decay: 1e-3,
            patience: Some(20),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative, decay factor positive".into(),
            ));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs {:?} are not strictly increasing",
                self.lr_decay_epochs
            )));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "decay epoch {last} is not below the epoch budget {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Same schedule shape on a different epoch budget: each decay epoch
    /// keeps its relative position.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let mut out = self.clone();
        out.epochs = epochs;
        let mut decays: Vec<usize> = self
            .lr_decay_epochs
            .iter()
            .map(|&d| (d * epochs + self.epochs / 2) / self.epochs)
            .filter(|&d| d > 0 && d < epochs)
            .collect();
        decays.dedup();
        out.lr_decay_epochs = decays;
        out
    }
}

/// `base_lr * factor^k`, with `k` the number of decay epochs at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(k as i32)
}

/// Subject identifiers of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Sample indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn new<S: ToString>(train: &[S], val: &[S], test: &[S]) -> Result<Self> {
        let set = |v: &[S]| v.iter().map(ToString::to_string).collect();
        let s = SplitSpec {
            train: set(train),
            val: set(val),
            test: set(test),
        };
        s.validate()?;
        Ok(s)
    }

    /// Partitions must be non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if part.is_empty() {
                return Err(Error::Split(format!("{name} partition has no subjects")));
            }
        }
        for (a, b, x, y) in [
            ("train", "val", &self.train, &self.val),
            ("train", "test", &self.train, &self.test),
            ("val", "test", &self.val, &self.test),
        ] {
            if let Some(s) = x.intersection(y).next() {
                return Err(Error::Split(format!("subject {s} is in both {a} and {b}")));
            }
        }
        Ok(())
    }

    /// Assigns every sample to its subject's partition. Samples of subjects
    /// outside the split are left out; an empty partition is an error.
    pub fn partition(&self, subjects: &[String]) -> Result<Partition> {
        self.validate()?;
        let mut p = Partition {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut unused = BTreeSet::new();
        for (i, s) in subjects.iter().enumerate() {
            if self.train.contains(s) {
                p.train.push(i);
            } else if self.val.contains(s) {
                p.val.push(i);
            } else if self.test.contains(s) {
                p.test.push(i);
            } else {
                unused.insert(s.as_str());
            }
        }
        if !unused.is_empty() {
            log::warn!("subjects outside the split are ignored: {unused:?}");
        }
        for (name, part) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
            if part.is_empty() {
                return Err(Error::Split(format!("{name} partition has no clips")));
            }
        }
        Ok(p)
    }
}

/// Hard check that no subject contributes clips to two partitions.
pub fn assert_subject_disjoint(train: &FeatureDataset, val: &FeatureDataset, test: &FeatureDataset) -> Result<()> {
    let (a, b, c) = (train.subject_set(), val.subject_set(), test.subject_set());
    for (x, y, name) in [(&a, &b, "train/val"), (&a, &c, "train/test"), (&b, &c, "val/test")] {
        if let Some(s) = x.intersection(y).next() {
            return Err(Error::Split(format!("subject {s} leaks across {name}")));
        }
    }
    Ok(())
}

/// Tracks the best validation loss seen and the weights that produced it.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<Checkpoint>,
    pub epochs_since_best: usize,
    pub patience: Option<usize>,
}

impl EarlyStopState {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            best_checkpoint: None,
            epochs_since_best: 0,
            patience,
        }
    }

    /// Records one epoch; `snapshot` is called only on improvement.
    /// Returns true once patience is exhausted.
    pub fn update(&mut self, epoch: usize, val_loss: f64, snapshot: impl FnOnce() -> Checkpoint) -> bool {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.best_checkpoint = Some(snapshot());
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.patience.is_some_and(|p| self.epochs_since_best >= p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Wall-clock training time; the only field that varies between
    /// identical runs.
    pub elapsed: std::time::Duration,
}

impl TrainReport {
    pub fn write_history(&self, path: &Path) -> Result<()> {
        write_history(&self.history, path)
    }
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::parse(path, i as u64 + 2, e.to_string())))
        .collect()
}

/// Mean cross-entropy and weighted F1 of eval-mode predictions.
pub fn evaluate_loss<M: Classifier + ?Sized>(model: &mut M, data: &FeatureDataset) -> Result<(f64, f64)> {
    let kinds = model.features();
    let classes = model.classes();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut predicted = Vec::with_capacity(data.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk, &kinds)?;
        let logits = model.predict_logits(&batch)?;
        for (row, &label) in logits.rows().zip(&batch.labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            predicted.push(argmax(row));
        }
    }
    let cm = ConfusionMatrix::from_predictions(classes, &data.labels, &predicted)?;
    Ok((loss / data.len() as f64, weighted_f1(&cm)?))
}

/// Trains `model` on `train`, early-stopping on `val` loss and restoring the
/// best weights before returning.
pub fn train_model<M: Classifier + ?Sized>(
    model: &mut M,
    train: &FeatureDataset,
    val: &FeatureDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Split("training and validation sets must be non-empty".into()));
    }
    if let Some(&l) = train.labels.iter().chain(&val.labels).find(|&&l| l >= model.classes()) {
        return Err(Error::Label(format!("label {l} outside {} classes", model.classes())));
    }
    let kinds = model.features();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.base_lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = EarlyStopState::new(cfg.patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        adam.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk, &kinds)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, true)?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss became {value} in epoch {epoch}")));
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            drop(batch);
            model.params_mut().absorb(&grads, &out.bound)?;
            adam.step(model.params_mut())?;
        }
        let (val_loss, val_f1) = evaluate_loss(model, val)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_loss,
            val_f1,
        };
        log::debug!(
            "epoch {epoch}: lr {lr} train {:.5} val {val_loss:.5} f1 {val_f1:.4}",
            record.train_loss
        );
        history.push(record);
        if stop.update(epoch, val_loss, || model.checkpoint()) {
            stopped_early = true;
            break;
        }
    }
    let best = stop
        .best_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Numeric("validation loss never became finite".into()))?;
    model.restore(best)?;
    Ok(TrainReport {
        history,
        best_epoch: stop.best_epoch.expect("set with checkpoint"),
        best_val_loss: stop.best_val_loss,
        stopped_early,
        elapsed: started.elapsed(),
    })
}

/// Builds the standard expert for `key` with its derived seed and trains it.
pub fn train_expert(
    layout: &JointLayout,
    key: ExpertKey,
    classes: usize,
    train: &FeatureDataset,
    val: &FeatureDataset,
    cfg: &TrainConfig,
) -> Result<(ExpertNetwork, TrainReport)> {
    let seed = key.seed(cfg.seed);
    let config = ExpertConfig::standard(key.feature, key.graph, layout.selected_count(), classes);
    let graph = build_graph(layout, key.graph)?;
    let mut net = ExpertNetwork::new(config, graph, seed)?;
    let expert_cfg = TrainConfig { seed, ..cfg.clone() };
    let report = train_model(&mut net, train, val, &expert_cfg)?;
    Ok((net, report))
}

/// A trained committee and the training record of each expert.
pub struct CommitteeRun {
    pub committee: ExpertCommittee,
    pub reports: Vec<(ExpertKey, TrainReport)>,
}

/// Trains every expert of `committee`'s key set independently on up to
/// `workers` threads. Results do not depend on `workers` or on the order
/// in which experts finish.
pub fn train_committee(
    layout: &JointLayout,
    mut committee: ExpertCommittee,
    train: &FeatureDataset,
    val: &FeatureDataset,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<CommitteeRun> {
    cfg.validate()?;
    let keys = committee.keys();
    let classes = committee.classes();
    let job = |key: ExpertKey| {
        train_expert(layout, key, classes, train, val, cfg).map_err(|e| Error::Expert {
            expert: key.to_string(),
            source: Box::new(e),
        })
    };
    let results: Vec<Result<(ExpertNetwork, TrainReport)>> = if workers <= 1 {
        keys.iter().map(|&k| job(k)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| keys.par_iter().map(|&k| job(k)).collect())
    };
    let mut reports = Vec::with_capacity(keys.len());
    for (&key, result) in keys.iter().zip(results) {
        let (net, report) = result?;
        committee.insert(net)?;
        reports.push((key, report));
    }
    Ok(CommitteeRun { committee, reports })
}

pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "committee.json";

/// Writes `<run>/expert_<feature>_<graph>/{checkpoint, history.csv}` for
/// every expert. Returns the checkpoint paths relative to `run_dir`.
pub fn save_experts(run_dir: &Path, run: &CommitteeRun) -> Result<Vec<(ExpertKey, std::path::PathBuf)>> {
    let mut out = Vec::with_capacity(run.reports.len());
    for (key, report) in &run.reports {
        let rel = Path::new(&key.dir_name()).to_path_buf();
        let dir = run_dir.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let expert = run
            .committee
            .get(*key)
            .ok_or_else(|| Error::CommitteeIncomplete(format!("no trained expert {key}")))?;
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &expert.checkpoint())?;
        report.write_history(&dir.join(HISTORY_FILE))?;
        out.push((*key, rel.join(CHECKPOINT_FILE)));
    }
    Ok(out)
}
