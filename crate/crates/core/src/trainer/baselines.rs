use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite_loss, epoch_batches, eval_loss, teacher_batch, EarlyStop, StepRecord, TrainConfig, Verdict};
use crate::error::{Error, Result};
use crate::metrics::{Metric, ScoreSet};
use crate::model::{bind_adapters, bind_base, forward_on_tape, greedy_decode_batch, AdapterSet, BaseModel, ModelConfig};
use crate::numerics::{AdamW, Matrix, Tape};
use crate::pruning::PruneConfig;
use crate::tasks::Example;

/// Full-parameter training of the base model itself.
#[derive(Clone, Debug)]
pub struct BasePretrain {
    pub model: BaseModel,
    pub best_epoch: usize,
    pub epoch_val_losses: Vec<f64>,
    pub log: Vec<StepRecord>,
}

/// Trains a randomly initialised base (seeded by `config.seed`) on
/// `train`, keeping the lowest-validation-loss epoch. Used to give the
/// frozen base a generic skill before any adapter is attached.
pub fn pretrain_base(
    model_config: ModelConfig,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<BasePretrain> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("base pre-training needs non-empty train and validation sets"));
    }
    let mut model = BaseModel::random(model_config, config.seed)?;
    let empty = AdapterSet::new();
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut optimizer = AdamW::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stop = EarlyStop::new(config.patience);
    let mut best = model.clone();
    let mut losses = Vec::new();
    let mut log = Vec::new();
    let mut step = 0u64;

    for epoch in 1..=config.max_epochs {
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            step += 1;
            let batch = teacher_batch(&model, train, &idx)?;
            let mut tape = Tape::new();
            let bv = bind_base(&mut tape, &model, true);
            let av = bind_adapters(&mut tape, &empty, false);
            let logits = forward_on_tape(&mut tape, &model, &bv, &empty, &av, &batch, None, None)?;
            let loss_var = tape.cross_entropy(logits, &batch.targets)?;
            let loss = tape.value(loss_var).as_slice()[0];
            check_finite_loss(loss, step, epoch)?;
            let mut grads = tape.backward(loss_var)?;
            let grads: Vec<Matrix> = bv
                .all
                .iter()
                .map(|&v| grads.take(v).ok_or_else(|| Error::contract("missing base gradient")))
                .collect::<Result<_>>()?;
            let mut params: Vec<(&str, &mut Matrix)> = names
                .iter()
                .map(String::as_str)
                .zip(model.tensors_mut().into_iter().map(|(_, m)| m))
                .collect();
            let grad_refs: Vec<&Matrix> = grads.iter().collect();
            optimizer.step(&mut params, &grad_refs)?;
            log.push(StepRecord {
                step,
                epoch,
                train_loss: f64::from(loss),
                val_loss: None,
                pruned_entries: 0,
                pruned_modules: 0,
                realized_del_pct: 0.0,
                smoother_step: None,
            });
        }
        let val_loss = eval_loss(&model, &empty, val)?;
        if let Some(last) = log.last_mut() {
            last.val_loss = Some(val_loss);
        }
        losses.push(val_loss);
        log::debug!("base epoch {epoch}: val loss {val_loss:.5}");
        match stop.observe(epoch, val_loss) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    Ok(BasePretrain {
        model: best,
        best_epoch: stop.best_epoch,
        epoch_val_losses: losses,
        log,
    })
}

/// Frozen adapters combined with one scalar weight per task tag.
#[derive(Clone, Debug)]
pub struct FrozenMerge {
    pub weights: Vec<(String, f32)>,
    pub train_loss: f64,
    /// The adapters with each task's `B` scaled by its weight.
    pub adapters: AdapterSet,
}

/// Derivative-free search for per-task merge weights over frozen adapters:
/// `trials` uniform samples in [−1, 1]^N, then one sweep that tries a
/// 0.1-spaced grid on each coordinate in turn. Minimises loss on `train`.
pub fn frozen_weight_merge(
    base: &BaseModel,
    adapters: &AdapterSet,
    train: &[Example],
    trials: usize,
    seed: u64,
) -> Result<FrozenMerge> {
    if trials == 0 {
        return Err(Error::config("frozen merge needs at least one trial"));
    }
    if train.is_empty() {
        return Err(Error::contract("frozen merge needs training examples"));
    }
    let tags = adapters.task_tags();
    let loss_of = |w: &[f32]| -> Result<f64> {
        let weights: Vec<(String, f32)> = tags.iter().cloned().zip(w.iter().copied()).collect();
        eval_loss(base, &adapters.scaled_by_task(&weights), train)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_w = vec![0.0f32; tags.len()];
    let mut best = f64::INFINITY;
    for _ in 0..trials {
        let w: Vec<f32> = (0..tags.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let l = loss_of(&w)?;
        if l < best {
            best = l;
            best_w = w;
        }
    }
    for k in 0..tags.len() {
        for step in -10..=10 {
            let mut w = best_w.clone();
            w[k] = step as f32 / 10.0;
            let l = loss_of(&w)?;
            if l < best {
                best = l;
                best_w = w;
            }
        }
    }
    let weights: Vec<(String, f32)> = tags.into_iter().zip(best_w).collect();
    Ok(FrozenMerge {
        adapters: adapters.scaled_by_task(&weights),
        weights,
        train_loss: best,
    })
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub prune_unit: String,
    pub prune_reset: String,
    pub ratio_or_threshold: String,
}

/// Generated outputs and per-example scores for one system on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub hypotheses: Vec<Vec<u32>>,
    /// Per metric: per-example scores and the corpus-level figure.
    pub scores: Vec<(Metric, ScoreSet, f64)>,
}

impl Evaluation {
    pub fn corpus(&self, metric: Metric) -> Option<f64> {
        self.scores.iter().find(|(m, _, _)| *m == metric).map(|(_, _, v)| *v)
    }

    pub fn per_example(&self, metric: Metric) -> Option<&ScoreSet> {
        self.scores.iter().find(|(m, _, _)| *m == metric).map(|(_, s, _)| s)
    }

    /// Rows for `results.csv`; prune columns are empty unless `prune` is an
    /// enabled configuration.
    pub fn records(&self, task: &str, method: &str, seed: u64, prune: Option<&PruneConfig>) -> Vec<EvalRecord> {
        let (unit, reset, knob) = match prune.filter(|p| p.enabled) {
            Some(p) => (p.unit.to_string(), p.reset.to_string(), format!("{}", p.knob())),
            None => (String::new(), String::new(), String::new()),
        };
        self.scores
            .iter()
            .map(|(m, _, v)| EvalRecord {
                task: task.to_string(),
                method: method.to_string(),
                seed,
                metric: m.to_string(),
                value: *v,
                prune_unit: unit.clone(),
                prune_reset: reset.clone(),
                ratio_or_threshold: knob.clone(),
            })
            .collect()
    }
}

/// Greedy-decodes every example and scores it against its target.
pub fn evaluate_method(
    base: &BaseModel,
    adapters: &AdapterSet,
    examples: &[Example],
    metrics: &[Metric],
    max_new_tokens: usize,
) -> Result<Evaluation> {
    let inputs: Vec<&[u32]> = examples.iter().map(|e| &e.input[..]).collect();
    let hypotheses = greedy_decode_batch(base, adapters, &inputs, max_new_tokens)?;
    let scores = metrics
        .iter()
        .map(|&m| {
            let pairs: Vec<(&[u32], &[u32])> = hypotheses
                .iter()
                .zip(examples)
                .map(|(h, e)| (&h[..], &e.target[..]))
                .collect();
            let per = ScoreSet {
                metric: m.to_string(),
                scores: pairs.iter().map(|(h, r)| m.score(h, r)).collect(),
            };
            (m, per, m.corpus_score(&pairs))
        })
        .collect();
    Ok(Evaluation { hypotheses, scores })
}
