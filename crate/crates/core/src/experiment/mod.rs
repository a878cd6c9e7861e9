//! The synthetic experiment suite: base and related-adapter pre-training,
//! every compared method, pruning grid searches, ablations and paired
//! significance tests.

mod output;
mod store;

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;

use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::importance::{collect_activation_norms, grad_importance, input_importance, ImportanceScores, SmootherState};
use crate::metrics::{approx_randomization, Metric};
use crate::model::{AdapterSet, BaseModel};
use crate::pruning::{InitSource, PruneConfig, PruneUnit, ResetMode};
use crate::tasks::{generate, subsample_sizes, Corpus, TaskSpec};
use crate::trainer::{
    adapter_loss_and_grads, evaluate_method, fresh_adapters, frozen_weight_merge, merge_train, pretrain_adapter,
    pretrain_base, teacher_batch, EvalRecord, Evaluation, ImportanceMetric, TrainConfig,
};

pub use output::{
    aggregate, read_results, read_scores, score_rows, write_csv, write_grid_csv, write_results, write_scores,
    write_significance, ScoreRow, SummaryRow,
};
pub use store::Store;

/// Runs `tasks` on up to `jobs` threads; results come back in input order.
pub fn run_jobs<'a, T: Send>(jobs: usize, tasks: Vec<Box<dyn FnOnce() -> Result<T> + Send + 'a>>) -> Vec<Result<T>> {
    let n = tasks.len();
    if jobs <= 1 || n <= 1 {
        return tasks.into_iter().map(|t| t()).collect();
    }
    let queue = Mutex::new(tasks.into_iter().enumerate().collect::<VecDeque<_>>());
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let Some((i, task)) = queue.lock().expect("job queue poisoned").pop_front() else {
                    break;
                };
                let r = task();
                results.lock().expect("job results poisoned")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("job results poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Sorted, deduplicated knob values; duplicates are reported.
pub fn dedup_knobs(knobs: &[f64]) -> Vec<f64> {
    let mut out = knobs.to_vec();
    out.sort_by(f64::total_cmp);
    let before = out.len();
    out.dedup();
    if out.len() != before {
        warn!("dropped {} duplicate grid value(s)", before - out.len());
    }
    out
}

/// A method compared in the results table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    ZeroShot,
    /// One related task's adapters, used as-is on the target.
    LoraSingle(String),
    /// A fresh adapter trained on the target data only.
    LoraTarget,
    /// Per-task scalar weights over frozen related adapters.
    FrozenMerge,
    /// Adaptive merge without pruning.
    Merge,
    /// Adaptive merge with pruning under the given importance metric.
    MergeDel(ImportanceMetric),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::ZeroShot => f.write_str("zero_shot"),
            Method::LoraSingle(t) => write!(f, "lora_single:{t}"),
            Method::LoraTarget => f.write_str("lora_target"),
            Method::FrozenMerge => f.write_str("frozen_merge"),
            Method::Merge => f.write_str("merge"),
            Method::MergeDel(ImportanceMetric::Input) => f.write_str("merge_del"),
            Method::MergeDel(m) => write!(f, "merge_del:{m}"),
        }
    }
}

fn prune_slug(metric: ImportanceMetric, p: &PruneConfig) -> String {
    let init = match (p.reset, p.init_source) {
        (ResetMode::Init, InitSource::Creation) => "-creation",
        _ => "",
    };
    format!("{metric}-{}-{}{init}-{}", p.unit, p.reset, p.knob())
}

#[derive(Clone, Debug)]
pub struct RelatedTask {
    pub name: String,
    pub corpus: Corpus,
    pub adapters: AdapterSet,
}

/// Related-task corpora and the target pool, generated from the config.
pub fn task_corpora(cfg: &ExperimentConfig) -> Result<(Vec<(TaskSpec, Corpus)>, (TaskSpec, Corpus))> {
    let related = cfg
        .related_specs()?
        .into_iter()
        .map(|s| {
            let c = generate(&s, cfg.tasks.related_sizes)?;
            Ok((s, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let target = cfg.target_spec()?;
    let pool = generate(&target, cfg.tasks.target_pool)?;
    Ok((related, (target, pool)))
}

/// A pre-trained base with its related adapters and the target pool.
#[derive(Debug)]
pub struct Suite {
    pub config: ExperimentConfig,
    pub base: BaseModel,
    pub related: Vec<RelatedTask>,
    pub target: String,
    pub target_pool: Corpus,
}

impl Suite {
    /// Generates all corpora, pre-trains the base on the base task and one
    /// adapter set per related task (on `jobs` threads).
    pub fn prepare(cfg: &ExperimentConfig, store: &Store, jobs: usize) -> Result<Suite> {
        cfg.validate()?;
        let base_spec = cfg.base_spec()?;
        let base = store.base("base", || {
            let corpus = generate(&base_spec, cfg.tasks.related_sizes)?;
            info!("pre-training base on {}", base_spec.name);
            let r = pretrain_base(cfg.model_config()?, &corpus.train, &corpus.val, &cfg.base_train_config())?;
            info!(
                "base: best epoch {} val loss {:.4}",
                r.best_epoch,
                r.epoch_val_losses[r.best_epoch - 1]
            );
            Ok((r.model, r.log))
        })?;
        let (related, (target, target_pool)) = task_corpora(cfg)?;
        let base_ref = &base;
        let tasks: Vec<Box<dyn FnOnce() -> Result<RelatedTask> + Send + '_>> = related
            .into_iter()
            .map(|(spec, corpus)| {
                Box::new(move || {
                    let adapters = store.adapters(&format!("adapters/{}", spec.name), base_ref, || {
                        info!("pre-training {} adapters", spec.name);
                        let o = pretrain_adapter(
                            base_ref,
                            &spec.name,
                            &corpus.train,
                            &corpus.val,
                            &cfg.lora,
                            &cfg.related_train_config(),
                        )?;
                        info!("{}: best epoch {} val loss {:.4}", spec.name, o.best_epoch, o.best_val_loss);
                        Ok((o.adapters, o.log))
                    })?;
                    Ok(RelatedTask {
                        name: spec.name,
                        corpus,
                        adapters,
                    })
                }) as Box<dyn FnOnce() -> Result<RelatedTask> + Send>
            })
            .collect();
        let related = run_jobs(jobs, tasks).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Suite {
            config: cfg.clone(),
            base,
            related,
            target: target.name,
            target_pool,
        })
    }

    /// The target data for one seed: `n_train` training and the configured
    /// number of validation examples drawn from the pool; the full test split.
    pub fn seed_data(&self, seed: u64, n_train: usize) -> Result<Corpus> {
        subsample_sizes(&self.target_pool, n_train, self.config.tasks.target_val, seed)
    }

    pub fn related_adapters(&self) -> Result<AdapterSet> {
        AdapterSet::merged(self.related.iter().map(|r| &r.adapters))
    }

    /// Adapters a merge session starts from.
    pub fn merge_start(&self, seed: u64) -> Result<AdapterSet> {
        let mut set = self.related_adapters()?;
        if self.config.train.attach_target_adapter {
            let fresh = fresh_adapters(&self.base, &self.target, &self.config.lora, seed)?;
            set = AdapterSet::merged([&set, &fresh])?;
        }
        Ok(set)
    }

    fn cell_name(&self, seed: u64, data: &Corpus, leaf: &str) -> String {
        format!("n{}/seed{seed}/{leaf}", data.train.len())
    }

    /// Trains (or fetches from `store`) the adapters `method` evaluates with.
    /// `prune` is required for [`Method::MergeDel`] and ignored otherwise.
    pub fn train_method(
        &self,
        method: &Method,
        seed: u64,
        data: &Corpus,
        prune: Option<&PruneConfig>,
        store: &Store,
    ) -> Result<AdapterSet> {
        let cfg = &self.config;
        let base = &self.base;
        let plain = TrainConfig {
            prune: PruneConfig::default(),
            ..cfg.target_train_config(seed)
        };
        match method {
            Method::ZeroShot => Ok(AdapterSet::new()),
            Method::LoraSingle(task) => self
                .related
                .iter()
                .find(|r| r.name == *task)
                .map(|r| r.adapters.clone())
                .ok_or_else(|| Error::Config(format!("no related task named `{task}`"))),
            Method::LoraTarget => store.adapters(&self.cell_name(seed, data, "lora_target"), base, || {
                let o = pretrain_adapter(base, &self.target, &data.train, &data.val, &cfg.lora, &plain)?;
                Ok((o.adapters, o.log))
            }),
            Method::FrozenMerge => store.adapters(&self.cell_name(seed, data, "frozen_merge"), base, || {
                let fm = frozen_weight_merge(base, &self.related_adapters()?, &data.train, cfg.eval.frozen_trials, seed)?;
                info!("seed {seed}: frozen merge weights {:?}", fm.weights);
                Ok((fm.adapters, Vec::new()))
            }),
            Method::Merge => store.adapters(&self.cell_name(seed, data, "merge"), base, || {
                let o = merge_train(base, &self.merge_start(seed)?, &data.train, &data.val, &plain, cfg.lora.init_std)?;
                Ok((o.adapters, o.log))
            }),
            Method::MergeDel(metric) => {
                let prune = prune.ok_or_else(|| Error::contract("merge_del needs a pruning configuration"))?;
                let name = self.cell_name(seed, data, &format!("merge_del/{}", prune_slug(*metric, prune)));
                store.adapters(&name, base, || {
                    let tc = TrainConfig {
                        prune: *prune,
                        metric: *metric,
                        ..cfg.target_train_config(seed)
                    };
                    let o = merge_train(base, &self.merge_start(seed)?, &data.train, &data.val, &tc, cfg.lora.init_std)?;
                    Ok((o.adapters, o.log))
                })
            }
        }
    }

    pub fn evaluate(&self, adapters: &AdapterSet, examples: &[crate::tasks::Example], metrics: &[Metric]) -> Result<Evaluation> {
        evaluate_method(&self.base, adapters, examples, metrics, self.config.eval.max_new_tokens)
    }

    /// Module-level thresholds spanning the modules' mean importance at the
    /// start of merging: 0 (nothing pruned) plus cut points that would reset
    /// the lowest 1, n/4, n/2 and 3n/4 modules.
    pub fn auto_thresholds(&self, metric: ImportanceMetric, seed: u64, data: &Corpus) -> Result<Vec<f64>> {
        let set = self.merge_start(seed)?;
        let scores: ImportanceScores = match metric {
            ImportanceMetric::Input => input_importance(&set, &collect_activation_norms(&self.base, &set, &data.val)?)?,
            ImportanceMetric::Grad => {
                let cfg = &self.config.train;
                let mut smoother = SmootherState::new(cfg.smoother_beta1, cfg.smoother_beta2)?;
                let bs = self.config.train.batch_size.min(data.train.len());
                let mut out = None;
                for round in 0..2 {
                    let idx: Vec<usize> = (0..bs).map(|i| (round * bs + i) % data.train.len()).collect();
                    let batch = teacher_batch(&self.base, &data.train, &idx)?;
                    let (_, grads) = adapter_loss_and_grads(&self.base, &set, &batch, None)?;
                    out = Some(smoother.smooth(&grad_importance(&set, &grads)?)?);
                }
                out.expect("two smoother rounds")
            }
        };
        let mut means: Vec<f64> = scores.per_adapter.iter().map(|p| p.mean()).collect();
        means.sort_by(f64::total_cmp);
        let n = means.len();
        let mut ks = vec![1, n / 4, n / 2, 3 * n / 4];
        ks.retain(|&k| k >= 1 && k < n);
        ks.dedup();
        let mut out = vec![0.0];
        out.extend(ks.into_iter().map(|k| (means[k - 1] + means[k]) / 2.0));
        Ok(dedup_knobs(&out))
    }

    /// Trains one pruned merge per (seed, knob) cell and scores each on its
    /// seed's validation split with the selection metric.
    pub fn grid(&self, spec: &GridSpec, data: &[(u64, Corpus)], jobs: usize, store: &Store) -> Grid {
        let sel = self.config.eval.selection_metric;
        let knobs = dedup_knobs(&spec.knobs);
        let mut cells = Vec::new();
        for (seed, corpus) in data {
            for &knob in &knobs {
                cells.push((*seed, corpus, spec.at(knob)));
            }
        }
        let tasks: Vec<Box<dyn FnOnce() -> Result<GridCell> + Send + '_>> = cells
            .iter()
            .map(|&(seed, corpus, prune)| {
                Box::new(move || {
                    let adapters = self.train_method(&Method::MergeDel(spec.metric), seed, corpus, Some(&prune), store)?;
                    let val = self.evaluate(&adapters, &corpus.val, &[sel])?;
                    let score = val.corpus(sel).expect("selection metric evaluated");
                    info!("grid {} seed {seed}: val {sel} {score:.4}", prune_slug(spec.metric, &prune));
                    Ok(GridCell {
                        seed,
                        prune,
                        val_score: score,
                        adapters,
                    })
                }) as Box<dyn FnOnce() -> Result<GridCell> + Send>
            })
            .collect();
        let mut grid = Grid {
            spec: GridSpec { knobs, ..spec.clone() },
            selection_metric: sel,
            cells: Vec::new(),
            failures: Vec::new(),
        };
        for (r, (seed, _, prune)) in run_jobs(jobs, tasks).into_iter().zip(&cells) {
            match r {
                Ok(c) => grid.cells.push(c),
                Err(e) => {
                    warn!("grid cell {} seed {seed} failed: {e}", prune_slug(spec.metric, prune));
                    grid.failures.push((*seed, prune.knob(), e.to_string()));
                }
            }
        }
        grid
    }
}

/// A family of pruning configurations differing only in the knob.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub metric: ImportanceMetric,
    /// Unit, reset mode and init source; the knob is overwritten per cell.
    pub template: PruneConfig,
    pub knobs: Vec<f64>,
}

impl GridSpec {
    pub fn at(&self, knob: f64) -> PruneConfig {
        let mut p = PruneConfig {
            enabled: true,
            ..self.template
        };
        match p.unit {
            PruneUnit::Parameter => p.ratio_percent = knob,
            PruneUnit::Module => p.threshold = knob,
        }
        p
    }

    pub fn label(&self) -> String {
        let t = &self.template;
        format!("{}/{}/{}", self.metric, t.unit, t.reset)
    }
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub seed: u64,
    pub prune: PruneConfig,
    pub val_score: f64,
    pub adapters: AdapterSet,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    pub selection_metric: Metric,
    pub cells: Vec<GridCell>,
    /// (seed, knob, error) of cells that failed.
    pub failures: Vec<(u64, f64, String)>,
}

impl Grid {
    /// Mean validation score per knob over the seeds that completed.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.spec
            .knobs
            .iter()
            .filter_map(|&k| {
                let v: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.prune.knob() == k)
                    .map(|c| c.val_score)
                    .collect();
                (!v.is_empty()).then(|| (k, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    /// Knob with the highest mean validation score; ties go to the smaller.
    pub fn selected(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (k, v) in self.curve() {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn cell(&self, seed: u64, knob: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.seed == seed && c.prune.knob() == knob)
    }
}

/// Where a grid's knob values come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Knobs {
    List(Vec<f64>),
    /// Module thresholds derived from importance at merge start.
    Auto,
}

/// What [`run`] does.
#[derive(Clone, Debug)]
pub struct Plan {
    pub seeds: Vec<u64>,
    pub target_train: usize,
    pub metric: ImportanceMetric,
    /// Unit/reset/init of the main grid.
    pub prune: PruneConfig,
    pub knobs: Knobs,
    /// Methods other than merge_del to train and evaluate.
    pub methods: Vec<Method>,
    /// Also run the metric × reset × unit ablation.
    pub ablation: bool,
    pub jobs: usize,
}

/// Default parameter-level grid.
pub const DEFAULT_RATIOS: [f64; 10] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

impl Plan {
    pub fn from_config(cfg: &ExperimentConfig, suite: &Suite) -> Plan {
        let mut methods = vec![Method::ZeroShot];
        methods.extend(suite.related.iter().map(|r| Method::LoraSingle(r.name.clone())));
        methods.extend([Method::LoraTarget, Method::FrozenMerge, Method::Merge]);
        Plan {
            seeds: cfg.seeds.clone(),
            target_train: cfg.tasks.target_train,
            metric: cfg.train.metric,
            prune: cfg.prune,
            knobs: match cfg.prune.unit {
                PruneUnit::Parameter => Knobs::List(DEFAULT_RATIOS.to_vec()),
                PruneUnit::Module => Knobs::Auto,
            },
            methods,
            ablation: false,
            jobs: 1,
        }
    }
}

/// Test-split evaluation of one method on one seed.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    pub seed: u64,
    pub prune: Option<PruneConfig>,
    pub eval: Evaluation,
}

/// Paired approximate-randomization comparison on pooled per-example scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub task: String,
    pub target_train: usize,
    pub seeds: Vec<u64>,
    pub grids: Vec<Grid>,
    pub results: Vec<MethodResult>,
    pub comparisons: Vec<Comparison>,
    pub failures: Vec<String>,
}

impl Report {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.results
            .iter()
            .flat_map(|r| r.eval.records(&self.task, &r.method, r.seed, r.prune.as_ref()))
            .collect()
    }

    fn matching<'a>(&'a self, method: &'a str, prune: Option<&'a PruneConfig>) -> impl Iterator<Item = &'a MethodResult> {
        self.results
            .iter()
            .filter(move |r| r.method == method && prune.map_or(true, |p| r.prune.as_ref() == Some(p)))
    }

    /// Per-seed corpus scores of `method`, in seed order.
    pub fn seed_scores(&self, method: &str, metric: Metric) -> Vec<f64> {
        self.matching(method, None).filter_map(|r| r.eval.corpus(metric)).collect()
    }

    /// Mean over seeds of the corpus score, restricted to `prune` if given.
    pub fn mean_where(&self, method: &str, prune: Option<&PruneConfig>, metric: Metric) -> Option<f64> {
        let v: Vec<f64> = self.matching(method, prune).filter_map(|r| r.eval.corpus(metric)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean(&self, method: &str, metric: Metric) -> Option<f64> {
        self.mean_where(method, None, metric)
    }

    /// Per-example scores of `method` concatenated over seeds.
    pub fn pooled(&self, method: &str, prune: Option<&PruneConfig>, metric: Metric) -> Vec<f64> {
        self.matching(method, prune)
            .filter_map(|r| r.eval.per_example(metric))
            .flat_map(|s| s.scores.iter().copied())
            .collect()
    }

    /// Name of the related-task adapter with the best mean score.
    pub fn best_single(&self, metric: Metric) -> Option<String> {
        let mut names: Vec<&str> = self
            .results
            .iter()
            .filter(|r| r.method.starts_with("lora_single:"))
            .map(|r| r.method.as_str())
            .collect();
        names.dedup();
        names
            .into_iter()
            .filter_map(|n| self.mean(n, metric).map(|v| (n, v)))
            .fold(None::<(&str, f64)>, |best, (n, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((n, v)),
            })
            .map(|(n, _)| n.to_string())
    }
}

/// The main pruning configuration selected by the grid, if any.
fn main_selection(grid: &Grid) -> Option<PruneConfig> {
    grid.selected().map(|k| grid.spec.at(k))
}

/// Runs `plan` on `suite`: the main grid on validation data, every baseline,
/// merge_del at the selected knob, the optional ablation and the paired
/// comparisons. Cells that fail are listed in [`Report::failures`].
pub fn run(suite: &Suite, plan: &Plan, store: &Store) -> Result<Report> {
    let cfg = &suite.config;
    if plan.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let data: Vec<(u64, Corpus)> = plan
        .seeds
        .iter()
        .map(|&s| Ok((s, suite.seed_data(s, plan.target_train)?)))
        .collect::<Result<_>>()?;
    let resolve = |metric: ImportanceMetric, knobs: &Knobs| -> Result<Vec<f64>> {
        match knobs {
            Knobs::List(v) if v.is_empty() => Err(Error::config("the grid needs at least one value")),
            Knobs::List(v) => Ok(v.clone()),
            Knobs::Auto => suite.auto_thresholds(metric, data[0].0, &data[0].1),
        }
    };

    let mut report = Report {
        task: suite.target.clone(),
        target_train: plan.target_train,
        seeds: plan.seeds.clone(),
        grids: Vec::new(),
        results: Vec::new(),
        comparisons: Vec::new(),
        failures: Vec::new(),
    };
    let metrics = cfg.eval.metrics.clone();

    let main_spec = GridSpec {
        metric: plan.metric,
        template: plan.prune,
        knobs: resolve(plan.metric, &plan.knobs)?,
    };
    let main = suite.grid(&main_spec, &data, plan.jobs, store);
    let selected = main_selection(&main);
    info!("main grid {}: curve {:?}, selected {:?}", main_spec.label(), main.curve(), selected.map(|p| p.knob()));

    // Baselines, one job per (seed, method).
    let mut jobs: Vec<(u64, &Corpus, Method)> = Vec::new();
    for (seed, corpus) in &data {
        for m in &plan.methods {
            jobs.push((*seed, corpus, m.clone()));
        }
    }
    let tasks: Vec<Box<dyn FnOnce() -> Result<MethodResult> + Send + '_>> = jobs
        .iter()
        .map(|(seed, corpus, m)| {
            let metrics = &metrics;
            Box::new(move || {
                let adapters = suite.train_method(m, *seed, corpus, None, store)?;
                Ok(MethodResult {
                    method: m.to_string(),
                    seed: *seed,
                    prune: None,
                    eval: suite.evaluate(&adapters, &corpus.test, metrics)?,
                })
            }) as Box<dyn FnOnce() -> Result<MethodResult> + Send>
        })
        .collect();
    for (r, (seed, _, m)) in run_jobs(plan.jobs, tasks).into_iter().zip(&jobs) {
        match r {
            Ok(r) => report.results.push(r),
            Err(e) => report.failures.push(format!("{m} seed {seed}: {e}")),
        }
    }

    let mut grids = vec![main];
    if plan.ablation {
        for unit in [PruneUnit::Parameter, PruneUnit::Module] {
            for metric in [ImportanceMetric::Input, ImportanceMetric::Grad] {
                for reset in [ResetMode::Zero, ResetMode::Init] {
                    let template = PruneConfig {
                        unit,
                        reset,
                        ..plan.prune
                    };
                    if metric == plan.metric && template.unit == plan.prune.unit && reset == plan.prune.reset {
                        continue;
                    }
                    // Parameter-level variants reuse the main grid's ratio.
                    let knobs = match (unit, selected) {
                        (PruneUnit::Parameter, Some(p)) if plan.prune.unit == PruneUnit::Parameter => vec![p.knob()],
                        (PruneUnit::Parameter, _) => match &plan.knobs {
                            Knobs::List(v) => v.clone(),
                            Knobs::Auto => DEFAULT_RATIOS.to_vec(),
                        },
                        (PruneUnit::Module, _) => resolve(metric, &Knobs::Auto)?,
                    };
                    let spec = GridSpec { metric, template, knobs };
                    grids.push(suite.grid(&spec, &data, plan.jobs, store));
                }
            }
        }
    }

    for grid in &grids {
        for (seed, knob, e) in &grid.failures {
            report
                .failures
                .push(format!("grid {} knob {knob} seed {seed}: {e}", grid.spec.label()));
        }
        let Some(k) = grid.selected() else { continue };
        let method = Method::MergeDel(grid.spec.metric).to_string();
        for (seed, corpus) in &data {
            let Some(cell) = grid.cell(*seed, k) else { continue };
            match suite.evaluate(&cell.adapters, &corpus.test, &metrics) {
                Ok(eval) => report.results.push(MethodResult {
                    method: method.clone(),
                    seed: *seed,
                    prune: Some(cell.prune),
                    eval,
                }),
                Err(e) => report.failures.push(format!("{method} seed {seed}: {e}")),
            }
        }
    }
    report.grids = grids;
    report.comparisons = compare(&report, selected.as_ref(), plan.metric, cfg)?;
    Ok(report)
}

fn compare(
    report: &Report,
    selected: Option<&PruneConfig>,
    metric: ImportanceMetric,
    cfg: &ExperimentConfig,
) -> Result<Vec<Comparison>> {
    let sel = cfg.eval.selection_metric;
    let merge_del = Method::MergeDel(metric).to_string();
    let mut pairs: Vec<(String, Option<&PruneConfig>, String)> = Vec::new();
    if let Some(best) = report.best_single(sel) {
        pairs.push(("merge".into(), None, best));
    }
    pairs.push((merge_del.clone(), selected, "merge".into()));
    pairs.push(("merge".into(), None, "frozen_merge".into()));
    pairs.push((merge_del, selected, "lora_target".into()));

    let mut out = Vec::new();
    for (a, prune_a, b) in pairs {
        if prune_a.is_none() && a.starts_with("merge_del") {
            continue;
        }
        let sa = report.pooled(&a, prune_a, sel);
        let sb = report.pooled(&b, None, sel);
        if sa.is_empty() || sa.len() != sb.len() {
            continue;
        }
        let p_value = approx_randomization(&sa, &sb, cfg.eval.sigtest_rounds, 0)?;
        out.push(Comparison {
            mean_a: report.mean_where(&a, prune_a, sel).unwrap_or(f64::NAN),
            mean_b: report.mean(&b, sel).unwrap_or(f64::NAN),
            a,
            b,
            metric: sel,
            p_value,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_keep_order() {
        let tasks: Vec<Box<dyn FnOnce() -> Result<usize> + Send>> =
            (0..20usize).map(|i| Box::new(move || Ok(i * i)) as Box<dyn FnOnce() -> Result<usize> + Send>).collect();
        let out: Vec<usize> = run_jobs(4, tasks).into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn knobs_sorted_and_deduplicated() {
        assert_eq!(dedup_knobs(&[30.0, 10.0, 30.0, 0.0]), vec![0.0, 10.0, 30.0]);
    }

    #[test]
    fn selection_prefers_smaller_knob_on_ties() {
        let spec = GridSpec {
            metric: ImportanceMetric::Input,
            template: PruneConfig::parameter(0.0, ResetMode::Zero),
            knobs: vec![0.0, 10.0, 20.0],
        };
        let cell = |k: f64, v: f64| GridCell {
            seed: 0,
            prune: spec.at(k),
            val_score: v,
            adapters: AdapterSet::new(),
        };
        let grid = Grid {
            spec: spec.clone(),
            selection_metric: Metric::RougeL,
            cells: vec![cell(0.0, 0.5), cell(10.0, 0.7), cell(20.0, 0.7)],
            failures: Vec::new(),
        };
        assert_eq!(grid.selected(), Some(10.0));
        let single = Grid {
            spec: GridSpec {
                knobs: vec![40.0],
                ..spec.clone()
            },
            cells: vec![cell(40.0, 0.1)],
            ..grid
        };
        assert_eq!(single.selected(), Some(40.0));
    }

    #[test]
    fn method_names() {
        assert_eq!(Method::LoraSingle("reverse".into()).to_string(), "lora_single:reverse");
        assert_eq!(Method::MergeDel(ImportanceMetric::Input).to_string(), "merge_del");
        assert_eq!(Method::MergeDel(ImportanceMetric::Grad).to_string(), "merge_del:grad");
    }
}
