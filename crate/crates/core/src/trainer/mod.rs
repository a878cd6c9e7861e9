//! Adapter pre-training, the merge-train-prune loop and the baselines.

mod baselines;
mod merge;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, bind_adapters, bind_base, forward_on_tape, AdapterSet, BaseModel, Batch};
use crate::numerics::{AdamWConfig, Tape};
use crate::pruning::PruneConfig;
use crate::tasks::Example;

pub use baselines::{
    evaluate_method, frozen_weight_merge, pretrain_base, BasePretrain, EvalRecord, Evaluation, FrozenMerge,
};
pub use merge::{merge_train, pretrain_adapter, fresh_adapters};

use crate::importance::MatrixPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImportanceMetric {
    /// `|W|·‖X‖₂` over the validation set.
    Input,
    /// Smoothed `|W·∂L/∂W|` from the current mini-batch.
    Grad,
}

impl ImportanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMetric::Input => "input",
            ImportanceMetric::Grad => "grad",
        }
    }
}

impl fmt::Display for ImportanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImportanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(ImportanceMetric::Input),
            "grad" | "gradient" => Ok(ImportanceMetric::Grad),
            other => Err(Error::Config(format!("unknown importance metric `{other}` (input, grad)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub prune: PruneConfig,
    pub metric: ImportanceMetric,
    pub smoother_beta1: f32,
    pub smoother_beta2: f32,
    /// Evaluate importance (and prune) every this many optimizer steps.
    pub importance_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_epochs: 40,
            patience: 5,
            seed: 0,
            prune: PruneConfig::default(),
            metric: ImportanceMetric::Input,
            smoother_beta1: 0.85,
            smoother_beta2: 0.85,
            importance_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max epochs must be positive"));
        }
        if self.importance_every == 0 {
            return Err(Error::config("importance cadence must be positive"));
        }
        self.prune.validate()
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    /// Set on the last step of each epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub pruned_entries: usize,
    pub pruned_modules: usize,
    pub realized_del_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoother_step: Option<u64>,
}

/// Result of a training run: the best-validation adapters plus history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    /// 1-based epoch whose end-of-epoch adapters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epoch_val_losses: Vec<f64>,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.epoch_val_losses.len()
    }

    pub fn write_log(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_log(&self.log, path)
    }
}

pub fn write_log(log: &[StepRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in log {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Epoch-level early stopping on validation loss.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStop {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            Verdict::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

/// Shuffled mini-batches of example indices covering `n` without replacement.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn teacher_batch(base: &BaseModel, examples: &[Example], idx: &[usize]) -> Result<Batch> {
    Batch::teacher_forced(
        idx.iter().map(|&i| (&examples[i].input[..], &examples[i].target[..])),
        base.config.max_len,
    )
}

/// Examples per forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 64;

/// Token-weighted mean cross-entropy over `examples`, evaluation mode.
pub fn eval_loss(base: &BaseModel, set: &AdapterSet, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("cannot compute a loss over zero examples"));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch = Batch::teacher_forced(
            chunk.iter().map(|e| (&e.input[..], &e.target[..])),
            base.config.max_len,
        )?;
        let n = batch.scored_positions();
        let l = model::batch_loss(base, set, &batch)?;
        total += f64::from(l) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Evaluation-mode loss and per-adapter `(dL/dA, dL/dB)` for a
/// teacher-forced batch, aligned with [`AdapterSet::modules`].
pub fn adapter_gradients(base: &BaseModel, set: &AdapterSet, batch: &Batch) -> Result<(f32, Vec<MatrixPair>)> {
    adapter_loss_and_grads(base, set, batch, None)
}

/// Loss and adapter gradients for one mini-batch (training mode when
/// `dropout` is given).
pub(crate) fn adapter_loss_and_grads(
    base: &BaseModel,
    set: &AdapterSet,
    batch: &Batch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f32, Vec<MatrixPair>)> {
    let mut tape = Tape::new();
    let bv = bind_base(&mut tape, base, false);
    let av = bind_adapters(&mut tape, set, true);
    let logits = forward_on_tape(&mut tape, base, &bv, set, &av, batch, dropout, None)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let value = tape.value(loss).as_slice()[0];
    let mut grads = tape.backward(loss)?;
    let pairs = av
        .a
        .iter()
        .zip(&av.b)
        .map(|(&a, &b)| {
            Ok(MatrixPair {
                a: grads.take(a).ok_or_else(|| Error::contract("missing gradient for adapter A"))?,
                b: grads.take(b).ok_or_else(|| Error::contract("missing gradient for adapter B"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((value, pairs))
}

fn check_finite_loss(loss: f32, step: u64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "training loss became {loss} at step {step} (epoch {epoch}); lower the learning rate"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn early_stop_patience_zero() {
        let mut es = EarlyStop::new(0);
        assert_eq!(es.observe(1, 1.0), Verdict::Improved);
        assert_eq!(es.observe(2, 1.5), Verdict::Stop);
        assert_eq!(es.best_epoch, 1);
    }

    #[test]
    fn early_stop_waits_patience_epochs() {
        let mut es = EarlyStop::new(2);
        es.observe(1, 1.0);
        assert_eq!(es.observe(2, 1.1), Verdict::Continue);
        assert_eq!(es.observe(3, 1.1), Verdict::Continue);
        assert_eq!(es.observe(4, 1.1), Verdict::Stop);
    }

    #[test]
    fn batches_partition_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(37, 16, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn defaults_match_table() {
        let c = TrainConfig::default();
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!((c.batch_size, c.max_epochs), (16, 40));
    }
}
