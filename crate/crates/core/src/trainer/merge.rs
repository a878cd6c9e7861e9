use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adapter_loss_and_grads, check_finite_loss, epoch_batches, eval_loss, teacher_batch, EarlyStop, ImportanceMetric,
    StepRecord, TrainConfig, TrainOutcome, Verdict,
};
use crate::error::{Error, Result};
use crate::importance::{collect_activation_norms, grad_importance, input_importance, SmootherState};
use crate::model::{init_adapter, AdapterSet, BaseModel, InitSnapshot, LoraConfig, Site};
use crate::numerics::{AdamW, Matrix};
use crate::pruning::{prune, InitSource, PruneReport};
use crate::tasks::Example;

/// Adaptive merge: every adapter in `adapters`
/// is fine-tuned on `train` with the base frozen; after each optimizer step
/// importance is evaluated and low-importance parameters are reset per
/// `config.prune`. Returns the adapters from the end of the epoch with the
/// lowest validation loss.
///
/// `init_std` is only used to rebuild creation-time values when
/// `config.prune.init_source` is [`InitSource::Creation`].
pub fn merge_train(
    base: &BaseModel,
    adapters: &AdapterSet,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    init_std: f32,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(format!(
            "merge training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    if adapters.is_empty() {
        return Err(Error::contract("merge training needs at least one adapter"));
    }
    adapters.check_against(base)?;

    let mut set = adapters.clone();
    let snapshot = match config.prune.init_source {
        InitSource::MergeStart => InitSnapshot::capture(&set),
        InitSource::Creation => InitSnapshot::creation_time(&set, init_std),
    };
    let names: Vec<String> = set
        .modules()
        .flat_map(|m| {
            let id = format!("{}@{}", m.task_tag, m.site);
            [format!("{id}.A"), format!("{id}.B")]
        })
        .collect();
    let mut optimizer = AdamW::new(config.optimizer)?;
    let mut smoother = SmootherState::new(config.smoother_beta1, config.smoother_beta2)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let pruning = config.prune.enabled;
    let mut stop = EarlyStop::new(config.patience);
    let mut best = set.clone();
    let mut epoch_losses = Vec::new();
    let mut log = Vec::new();
    let mut step = 0u64;

    for epoch in 1..=config.max_epochs {
        for idx in epoch_batches(train.len(), config.batch_size, &mut shuffle_rng) {
            step += 1;
            let batch = teacher_batch(base, train, &idx)?;
            let (loss, grads) = adapter_loss_and_grads(base, &set, &batch, Some(&mut dropout_rng))?;
            check_finite_loss(loss, step, epoch)?;
            {
                let mut params: Vec<(&str, &mut Matrix)> = Vec::with_capacity(names.len());
                let mut name = names.iter();
                for m in set.modules_mut() {
                    params.push((name.next().expect("two names per module"), &mut m.a));
                    params.push((name.next().expect("two names per module"), &mut m.b));
                }
                let grad_refs: Vec<&Matrix> = grads.iter().flat_map(|g| [&g.a, &g.b]).collect();
                optimizer.step(&mut params, &grad_refs)?;
            }

            let mut report = PruneReport::empty(&set);
            let mut smoother_step = None;
            if pruning && step % config.importance_every as u64 == 0 {
                let scores = match config.metric {
                    ImportanceMetric::Input => {
                        let norms = collect_activation_norms(base, &set, val)?;
                        Some(input_importance(&set, &norms)?)
                    }
                    ImportanceMetric::Grad => {
                        let s = smoother.smooth(&grad_importance(&set, &grads)?)?;
                        smoother_step = Some(smoother.step);
                        // The initialising observation leaves Ū = 0, so its
                        // scores carry no ranking; wait for the next one.
                        smoother.is_warm().then_some(s)
                    }
                };
                if let Some(scores) = scores {
                    report = prune(&mut set, &scores, &config.prune, &snapshot)?;
                }
            }
            log.push(StepRecord {
                step,
                epoch,
                train_loss: f64::from(loss),
                val_loss: None,
                pruned_entries: report.entries_reset,
                pruned_modules: report.modules_reset,
                realized_del_pct: report.realized_pct(),
                smoother_step,
            });
        }

        let val_loss = eval_loss(base, &set, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss became {val_loss} after epoch {epoch}")));
        }
        if let Some(last) = log.last_mut() {
            last.val_loss = Some(val_loss);
        }
        epoch_losses.push(val_loss);
        debug!("epoch {epoch}: val loss {val_loss:.5}");
        match stop.observe(epoch, val_loss) {
            Verdict::Improved => best = set.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }

    Ok(TrainOutcome {
        adapters: best,
        best_epoch: stop.best_epoch,
        best_val_loss: stop.best,
        epoch_val_losses: epoch_losses,
        log,
    })
}

/// Seed of the adapter at position `index` for a run seeded with `seed`.
fn adapter_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

/// Fresh adapters for `task_tag` at every query/value site.
pub fn fresh_adapters(base: &BaseModel, task_tag: &str, lora: &LoraConfig, seed: u64) -> Result<AdapterSet> {
    lora.validate()?;
    let mut set = AdapterSet::new();
    for (i, site) in Site::all(base).into_iter().enumerate() {
        set.insert(init_adapter(base, task_tag, site, lora, adapter_seed(seed, i))?)?;
    }
    Ok(set)
}

/// Trains fresh adapters on one task with pruning off and keeps the
/// lowest-validation-loss epoch.
pub fn pretrain_adapter(
    base: &BaseModel,
    task_tag: &str,
    train: &[Example],
    val: &[Example],
    lora: &LoraConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let fresh = fresh_adapters(base, task_tag, lora, config.seed)?;
    let config = TrainConfig {
        prune: crate::pruning::PruneConfig {
            enabled: false,
            ..config.prune
        },
        ..*config
    };
    merge_train(base, &fresh, train, val, &config, lora.init_std)
}
