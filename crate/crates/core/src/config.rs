//! INI-style experiment configuration.
//!
//! ```ini
//! seeds = 0, 1, 2
//!
//! [model]
//! d_model = 64
//!
//! [train]
//! lr = 0.0001
//! ```
//!
//! Every key has a default; unknown sections or keys are rejected.
//! [`ExperimentConfig::to_ini`] writes the fully resolved form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{LoraConfig, ModelConfig};
use crate::numerics::AdamWConfig;
use crate::pruning::PruneConfig;
use crate::tasks::{SplitSizes, TaskSpec, Transform, Vocab};
use crate::trainer::{ImportanceMetric, TrainConfig};

/// Model shape; the vocabulary size comes from the task vocabulary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSection {
    /// Optimizer settings for the target-task phase (merge, single adapter).
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub metric: ImportanceMetric,
    pub smoother_beta1: f32,
    pub smoother_beta2: f32,
    /// Learning rate and epoch cap for pre-training the related adapters.
    pub related_lr: f32,
    pub related_max_epochs: usize,
    /// Learning rate and epoch cap for pre-training the base model.
    pub base_lr: f32,
    pub base_max_epochs: usize,
    /// Also attach a fresh target-task adapter to the merged stack.
    pub attach_target_adapter: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TasksSection {
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub seed: u64,
    pub base_task: Transform,
    pub related: Vec<Transform>,
    pub target: Transform,
    pub related_sizes: SplitSizes,
    /// Size of the target task pool that per-seed subsamples are drawn from.
    pub target_pool: SplitSizes,
    pub target_train: usize,
    pub target_val: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub metrics: Vec<Metric>,
    /// Metric used to pick the grid-search winner.
    pub selection_metric: Metric,
    pub max_new_tokens: usize,
    pub frozen_trials: usize,
    pub sigtest_rounds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub lora: LoraConfig,
    pub train: TrainSection,
    /// `enabled`, `unit`, `reset`, `ratio`, `threshold`, `init_source`.
    pub prune: PruneConfig,
    /// Importance evaluation cadence in optimizer steps.
    pub cadence: usize,
    pub tasks: TasksSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            model: ModelSection {
                d_model: m.d_model,
                layers: m.layers,
                heads: m.heads,
                d_ff: m.d_ff,
                max_len: m.max_len,
            },
            lora: LoraConfig::default(),
            train: TrainSection {
                lr: t.optimizer.lr,
                weight_decay: t.optimizer.weight_decay,
                beta1: t.optimizer.beta1,
                beta2: t.optimizer.beta2,
                eps: t.optimizer.eps,
                batch_size: t.batch_size,
                max_epochs: t.max_epochs,
                patience: t.patience,
                metric: t.metric,
                smoother_beta1: t.smoother_beta1,
                smoother_beta2: t.smoother_beta2,
                related_lr: 1e-3,
                related_max_epochs: 40,
                base_lr: 1e-3,
                base_max_epochs: 40,
                attach_target_adapter: false,
            },
            prune: PruneConfig::default(),
            cadence: t.importance_every,
            tasks: TasksSection {
                symbols: 20,
                min_len: 4,
                max_len: 8,
                noise: 0.0,
                seed: 1,
                base_task: Transform::Copy,
                related: vec![Transform::Reverse, Transform::SelectMarked],
                target: Transform::Compose,
                related_sizes: SplitSizes {
                    train: 1000,
                    val: 100,
                    test: 100,
                },
                target_pool: SplitSizes {
                    train: 500,
                    val: 200,
                    test: 200,
                },
                target_train: 50,
                target_val: 50,
            },
            eval: EvalSection {
                metrics: Metric::ALL.to_vec(),
                selection_metric: Metric::RougeL,
                max_new_tokens: 16,
                frozen_trials: 100,
                sigtest_rounds: 1000,
            },
        }
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("`{value}` is not a valid number"))
}

fn boolean(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn via<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T, String> {
    value.parse().map_err(|e: Error| e.to_string())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `text`; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                if !["model", "lora", "train", "prune", "tasks", "eval"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            cfg.set(&section, key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let unknown = || Err(format!("unknown key `{key}` in [{section}]"));
        match section {
            "" => match key {
                "seeds" => self.seeds = parse_list(v, num)?,
                _ => return Err(format!("unknown top-level key `{key}`")),
            },
            "model" => {
                let m = &mut self.model;
                match key {
                    "d_model" => m.d_model = num(v)?,
                    "layers" => m.layers = num(v)?,
                    "heads" => m.heads = num(v)?,
                    "d_ff" => m.d_ff = num(v)?,
                    "max_len" => m.max_len = num(v)?,
                    _ => return unknown(),
                }
            }
            "lora" => {
                let l = &mut self.lora;
                match key {
                    "rank" => l.rank = num(v)?,
                    "alpha" => l.alpha = num(v)?,
                    "dropout" => l.dropout = num(v)?,
                    "init_std" => l.init_std = num(v)?,
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "lr" => t.lr = num(v)?,
                    "weight_decay" => t.weight_decay = num(v)?,
                    "beta1" => t.beta1 = num(v)?,
                    "beta2" => t.beta2 = num(v)?,
                    "eps" => t.eps = num(v)?,
                    "batch_size" => t.batch_size = num(v)?,
                    "max_epochs" => t.max_epochs = num(v)?,
                    "patience" => t.patience = num(v)?,
                    "metric" => t.metric = via(v)?,
                    "smoother_beta1" => t.smoother_beta1 = num(v)?,
                    "smoother_beta2" => t.smoother_beta2 = num(v)?,
                    "related_lr" => t.related_lr = num(v)?,
                    "related_max_epochs" => t.related_max_epochs = num(v)?,
                    "base_lr" => t.base_lr = num(v)?,
                    "base_max_epochs" => t.base_max_epochs = num(v)?,
                    "attach_target_adapter" => t.attach_target_adapter = boolean(v)?,
                    _ => return unknown(),
                }
            }
            "prune" => {
                let p = &mut self.prune;
                match key {
                    "enabled" => p.enabled = boolean(v)?,
                    "unit" => p.unit = via(v)?,
                    "reset" => p.reset = via(v)?,
                    "ratio" => p.ratio_percent = num(v)?,
                    "threshold" => p.threshold = num(v)?,
                    "init_source" => p.init_source = via(v)?,
                    "cadence" => self.cadence = num(v)?,
                    _ => return unknown(),
                }
            }
            "tasks" => {
                let t = &mut self.tasks;
                match key {
                    "symbols" => t.symbols = num(v)?,
                    "min_len" => t.min_len = num(v)?,
                    "max_len" => t.max_len = num(v)?,
                    "noise" => t.noise = num(v)?,
                    "seed" => t.seed = num(v)?,
                    "base_task" => t.base_task = via(v)?,
                    "related" => t.related = parse_list(v, via)?,
                    "target" => t.target = via(v)?,
                    "related_train" => t.related_sizes.train = num(v)?,
                    "related_val" => t.related_sizes.val = num(v)?,
                    "related_test" => t.related_sizes.test = num(v)?,
                    "target_pool_train" => t.target_pool.train = num(v)?,
                    "target_pool_val" => t.target_pool.val = num(v)?,
                    "target_test" => t.target_pool.test = num(v)?,
                    "target_train" => t.target_train = num(v)?,
                    "target_val" => t.target_val = num(v)?,
                    _ => return unknown(),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "metrics" => e.metrics = parse_list(v, via)?,
                    "selection_metric" => e.selection_metric = via(v)?,
                    "max_new_tokens" => e.max_new_tokens = num(v)?,
                    "frozen_trials" => e.frozen_trials = num(v)?,
                    "sigtest_rounds" => e.sigtest_rounds = num(v)?,
                    _ => return unknown(),
                }
            }
            _ => unreachable!("section names are checked on entry"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.model_config()?.validate()?;
        self.lora.validate()?;
        self.target_train_config(0).validate()?;
        if self.tasks.related.is_empty() {
            return Err(Error::config("at least one related task is required"));
        }
        let mut names: Vec<&str> = self.tasks.related.iter().map(|t| t.as_str()).collect();
        names.push(self.tasks.target.as_str());
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("related and target tasks must be distinct"));
        }
        if self.tasks.target_train > self.tasks.target_pool.train || self.tasks.target_val > self.tasks.target_pool.val {
            return Err(Error::config("target subsample is larger than the target pool"));
        }
        if self.eval.metrics.is_empty() {
            return Err(Error::config("at least one evaluation metric is required"));
        }
        if !self.eval.metrics.contains(&self.eval.selection_metric) {
            return Err(Error::Config(format!(
                "selection metric {} is not among the evaluated metrics",
                self.eval.selection_metric
            )));
        }
        for spec in self.task_specs()? {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::letters(self.tasks.symbols)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            vocab_size: self.vocab()?.model_size(),
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
        })
    }

    fn spec(&self, transform: Transform, index: u64) -> Result<TaskSpec> {
        let t = &self.tasks;
        let mut spec = TaskSpec::new(transform.as_str(), transform, self.vocab()?, t.seed.wrapping_add(index * 7919));
        spec.min_len = t.min_len;
        spec.max_len = t.max_len;
        spec.noise = t.noise;
        Ok(spec)
    }

    /// The base-pretraining task (inputs include markers so every symbol's
    /// embedding is trained).
    pub fn base_spec(&self) -> Result<TaskSpec> {
        let mut spec = self.spec(self.tasks.base_task, 0)?;
        spec.name = format!("base-{}", self.tasks.base_task);
        spec.marked_inputs = true;
        Ok(spec)
    }

    pub fn related_specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks
            .related
            .iter()
            .enumerate()
            .map(|(i, &t)| self.spec(t, i as u64 + 1))
            .collect()
    }

    pub fn target_spec(&self) -> Result<TaskSpec> {
        self.spec(self.tasks.target, self.tasks.related.len() as u64 + 1)
    }

    /// Base, related and target specs, in that order.
    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        let mut out = vec![self.base_spec()?];
        out.extend(self.related_specs()?);
        out.push(self.target_spec()?);
        Ok(out)
    }

    fn optimizer(&self, lr: f32) -> AdamWConfig {
        let t = &self.train;
        AdamWConfig {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }

    /// Training config for target-task runs (merge, merge with pruning,
    /// single fresh adapter) with the given seed.
    pub fn target_train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: self.optimizer(t.lr),
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed,
            prune: self.prune,
            metric: t.metric,
            smoother_beta1: t.smoother_beta1,
            smoother_beta2: t.smoother_beta2,
            importance_every: self.cadence,
        }
    }

    pub fn related_train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer(self.train.related_lr),
            max_epochs: self.train.related_max_epochs,
            seed: self.tasks.seed,
            prune: PruneConfig::default(),
            ..self.target_train_config(self.tasks.seed)
        }
    }

    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer(self.train.base_lr),
            max_epochs: self.train.base_max_epochs,
            ..self.related_train_config()
        }
    }

    /// Fully resolved configuration in the same format [`Self::parse`] reads.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let join = |v: Vec<String>| v.join(", ");
        let _ = writeln!(s, "seeds = {}", join(self.seeds.iter().map(u64::to_string).collect()));
        let m = &self.model;
        let _ = write!(
            s,
            "\n[model]\nd_model = {}\nlayers = {}\nheads = {}\nd_ff = {}\nmax_len = {}\n",
            m.d_model, m.layers, m.heads, m.d_ff, m.max_len
        );
        let l = &self.lora;
        let _ = write!(
            s,
            "\n[lora]\nrank = {}\nalpha = {}\ndropout = {}\ninit_std = {}\n",
            l.rank, l.alpha, l.dropout, l.init_std
        );
        let t = &self.train;
        let _ = write!(
            s,
            "\n[train]\nlr = {}\nweight_decay = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nbatch_size = {}\n\
             max_epochs = {}\npatience = {}\nmetric = {}\nsmoother_beta1 = {}\nsmoother_beta2 = {}\n\
             related_lr = {}\nrelated_max_epochs = {}\nbase_lr = {}\nbase_max_epochs = {}\n\
             attach_target_adapter = {}\n",
            t.lr,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.eps,
            t.batch_size,
            t.max_epochs,
            t.patience,
            t.metric,
            t.smoother_beta1,
            t.smoother_beta2,
            t.related_lr,
            t.related_max_epochs,
            t.base_lr,
            t.base_max_epochs,
            t.attach_target_adapter
        );
        let p = &self.prune;
        let _ = write!(
            s,
            "\n[prune]\nenabled = {}\nunit = {}\nreset = {}\nratio = {}\nthreshold = {}\ninit_source = {}\ncadence = {}\n",
            p.enabled, p.unit, p.reset, p.ratio_percent, p.threshold, p.init_source, self.cadence
        );
        let k = &self.tasks;
        let _ = write!(
            s,
            "\n[tasks]\nsymbols = {}\nmin_len = {}\nmax_len = {}\nnoise = {}\nseed = {}\nbase_task = {}\n\
             related = {}\ntarget = {}\nrelated_train = {}\nrelated_val = {}\nrelated_test = {}\n\
             target_pool_train = {}\ntarget_pool_val = {}\ntarget_test = {}\ntarget_train = {}\ntarget_val = {}\n",
            k.symbols,
            k.min_len,
            k.max_len,
            k.noise,
            k.seed,
            k.base_task,
            join(k.related.iter().map(Transform::to_string).collect()),
            k.target,
            k.related_sizes.train,
            k.related_sizes.val,
            k.related_sizes.test,
            k.target_pool.train,
            k.target_pool.val,
            k.target_pool.test,
            k.target_train,
            k.target_val
        );
        let e = &self.eval;
        let _ = write!(
            s,
            "\n[eval]\nmetrics = {}\nselection_metric = {}\nmax_new_tokens = {}\nfrozen_trials = {}\nsigtest_rounds = {}\n",
            join(e.metrics.iter().map(Metric::to_string).collect()),
            e.selection_metric,
            e.max_new_tokens,
            e.frozen_trials,
            e.sigtest_rounds
        );
        s
    }
}
