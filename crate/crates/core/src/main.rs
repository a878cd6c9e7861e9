use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use almp::config::ExperimentConfig;
use almp::experiment::{
    self, aggregate, read_results, read_scores, score_rows, write_csv, write_grid_csv, write_results, write_scores,
    write_significance, GridSpec, Knobs, Plan, Store, Suite,
};
use almp::metrics::{approx_randomization, Metric};
use almp::model::{load_adapters_for, load_base, save_adapters, save_base, AdapterSet};
use almp::pruning::{PruneUnit, ResetMode};
use almp::tasks::{corpus_exists, generate, load_corpus, save_corpus, subsample_sizes, Corpus};
use almp::trainer::{evaluate_method, merge_train, pretrain_adapter, pretrain_base, write_log, ImportanceMetric};
use almp::{Error, Result};

#[derive(Parser)]
#[command(name = "almp", version, about = "Adaptive LoRA merging with importance-based pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the related and target task datasets as JSONL.
    GenTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pre-train the frozen base model on the configured base task.
    PretrainBase {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train fresh adapters on one task directory.
    TrainAdapter {
        /// Directory holding `<task>.{train,val,test}.jsonl` and `vocab.txt`.
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Merge pre-trained adapters by training them on a target task,
    /// pruning per the `[prune]` section.
    MergeTrain {
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Grid-search the pruning ratio (or module threshold) on validation data.
    Grid {
        #[command(flatten)]
        run: RunArgs,
    },
    /// The whole suite: grid search, every baseline, merge_del at the
    /// selected ratio, significance tests and results.csv.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the importance-metric × reset × unit ablation.
        #[arg(long)]
        ablation: bool,
    },
    /// Evaluate a checkpoint (or the bare base) on one split.
    Eval {
        /// Adapter checkpoint; omit for the zero-shot base.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: PathBuf,
        /// Method name written to the results rows.
        #[arg(long, default_value = "eval")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// results.csv to write (rows are appended if it exists).
        #[arg(long)]
        out: PathBuf,
        /// Also write per-example scores here, for `sigtest`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Paired approximate randomization test on two per-example score files.
    Sigtest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long = "R", alias = "rounds", default_value_t = 1000)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "rouge_l")]
        metric: Metric,
    },
    /// Average results.csv over runs; one curve file per method when the
    /// runs differ in target training size.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pruning ratios in percent (parameter unit).
    #[arg(long, conflicts_with = "thresholds")]
    ratios: Option<String>,
    /// Comma-separated module thresholds, or `auto` (module unit).
    #[arg(long)]
    thresholds: Option<String>,
    /// Importance metric, overriding `[train] metric`.
    #[arg(long)]
    metric: Option<ImportanceMetric>,
    #[arg(long)]
    reset: Option<ResetMode>,
    /// Comma-separated seeds, overriding `seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Target training-set size, overriding `[tasks] target_train`.
    #[arg(long)]
    target_train: Option<usize>,
    /// Parallel jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Reuse finished checkpoints in an existing run directory.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Overwrite artifacts in an existing run directory.
    #[arg(long)]
    force: bool,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} does not exist", path.display())));
    }
    ExperimentConfig::load(path)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| usage(format!("`{v}` is not a valid {what}"))))
        .collect()
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn task_name(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| usage(format!("{} does not name a task directory", dir.display())))
}

fn load_task(dir: &Path) -> Result<(String, Corpus)> {
    let name = task_name(dir)?;
    let (corpus, _) = load_corpus(dir, &name)?;
    Ok((name, corpus))
}

fn gen_tasks(config: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = cfg.vocab()?;
    let (related, (target, pool)) = experiment::task_corpora(&cfg)?;
    let all: Vec<_> = related.iter().map(|(s, c)| (s, c)).chain([(&target, &pool)]).collect();
    for (spec, _) in &all {
        let dir = out.join(&spec.name);
        if corpus_exists(&dir, &spec.name) && !force {
            return Err(usage(format!("{} already holds {} data (pass --force)", dir.display(), spec.name)));
        }
    }
    for (spec, corpus) in all {
        let dir = out.join(&spec.name);
        save_corpus(&dir, &spec.name, corpus, &vocab)?;
        println!(
            "{}: {} train / {} val / {} test -> {}",
            spec.name,
            corpus.train.len(),
            corpus.val.len(),
            corpus.test.len(),
            dir.display()
        );
    }
    Ok(())
}

fn pretrain_base_cmd(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    refuse_overwrite(out, force)?;
    let spec = cfg.base_spec()?;
    let corpus = generate(&spec, cfg.tasks.related_sizes)?;
    let mut tc = cfg.base_train_config();
    if let Some(s) = seed {
        tc.seed = s;
    }
    let r = pretrain_base(cfg.model_config()?, &corpus.train, &corpus.val, &tc)?;
    create_parent(out)?;
    save_base(&r.model, out)?;
    write_log(&r.log, out.with_extension("log.jsonl"))?;
    println!(
        "base: best epoch {} of {}, val loss {:.4} -> {}",
        r.best_epoch,
        r.epoch_val_losses.len(),
        r.epoch_val_losses[r.best_epoch - 1],
        out.display()
    );
    Ok(())
}

fn train_adapter(task: &Path, base: &Path, config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    refuse_overwrite(out, force)?;
    let (name, corpus) = load_task(task)?;
    let base = load_base(base)?;
    let mut tc = cfg.related_train_config();
    if let Some(s) = seed {
        tc.seed = s;
    }
    let o = pretrain_adapter(&base, &name, &corpus.train, &corpus.val, &cfg.lora, &tc)?;
    create_parent(out)?;
    save_adapters(&o.adapters, out)?;
    o.write_log(out.with_extension("log.jsonl"))?;
    println!(
        "{name}: best epoch {} of {}, val loss {:.4} -> {}",
        o.best_epoch,
        o.epochs_run(),
        o.best_val_loss,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn merge_train_cmd(
    adapters: &[PathBuf],
    target: &Path,
    base: &Path,
    config: &Path,
    out: &Path,
    seed: u64,
    force: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ckpt = out.join("adapters.ckpt");
    refuse_overwrite(&ckpt, force)?;
    let base = load_base(base)?;
    let sets = adapters
        .iter()
        .map(|p| load_adapters_for(p, &base))
        .collect::<Result<Vec<_>>>()?;
    let set = AdapterSet::merged(&sets)?;
    let (_, corpus) = load_task(target)?;
    let n_train = cfg.tasks.target_train.min(corpus.train.len());
    let n_val = cfg.tasks.target_val.min(corpus.val.len());
    let data = subsample_sizes(&corpus, n_train, n_val, seed)?;
    let tc = cfg.target_train_config(seed);
    let o = merge_train(&base, &set, &data.train, &data.val, &tc, cfg.lora.init_std)?;
    write_text(&out.join("config.ini"), &cfg.to_ini())?;
    save_adapters(&o.adapters, &ckpt)?;
    o.write_log(out.join("log.jsonl"))?;
    println!(
        "merged {} modules on {n_train} examples: best epoch {} of {}, val loss {:.4} -> {}",
        set.len(),
        o.best_epoch,
        o.epochs_run(),
        o.best_val_loss,
        ckpt.display()
    );
    Ok(())
}

/// Opens (or validates) a run directory and returns the store for it.
fn open_run(args: &RunArgs, cfg: &ExperimentConfig) -> Result<Store> {
    let saved = args.out.join("config.ini");
    let text = cfg.to_ini();
    if saved.exists() && !args.force {
        if !args.resume {
            return Err(usage(format!(
                "{} is an existing run directory (pass --resume or --force)",
                args.out.display()
            )));
        }
        let prev = std::fs::read_to_string(&saved).map_err(|e| Error::Io {
            path: saved.clone(),
            source: e,
        })?;
        if prev != text {
            return Err(usage(format!(
                "{} was produced with a different configuration; use a fresh directory or --force",
                args.out.display()
            )));
        }
    } else {
        write_text(&saved, &text)?;
    }
    Ok(Store::at(&args.out, args.resume))
}

fn build_plan(args: &RunArgs, cfg: &ExperimentConfig, suite: &Suite) -> Result<Plan> {
    let mut plan = Plan::from_config(cfg, suite);
    plan.jobs = args.jobs.max(1);
    if let Some(t) = args.thresholds.as_deref() {
        plan.prune.unit = PruneUnit::Module;
        plan.knobs = if t.trim() == "auto" {
            Knobs::Auto
        } else {
            Knobs::List(parse_list(t, "threshold")?)
        };
    } else if let Some(r) = args.ratios.as_deref() {
        plan.prune.unit = PruneUnit::Parameter;
        plan.knobs = Knobs::List(parse_list(r, "ratio")?);
    }
    if let Knobs::List(v) = &plan.knobs {
        if v.is_empty() {
            return Err(usage("the grid needs at least one value"));
        }
    }
    Ok(plan)
}

fn apply_overrides(args: &RunArgs, cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(m) = args.metric {
        cfg.train.metric = m;
    }
    if let Some(r) = args.reset {
        cfg.prune.reset = r;
    }
    if let Some(s) = args.seeds.as_deref() {
        cfg.seeds = parse_list(s, "seed")?;
    }
    if let Some(n) = args.target_train {
        cfg.tasks.target_train = n;
    }
    if args.thresholds.is_some() {
        cfg.prune.unit = PruneUnit::Module;
    } else if args.ratios.is_some() {
        cfg.prune.unit = PruneUnit::Parameter;
    }
    cfg.validate()
}

fn grid_cmd(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(args, &mut cfg)?;
    let store = open_run(args, &cfg)?;
    let suite = Suite::prepare(&cfg, &store, args.jobs)?;
    let plan = build_plan(args, &cfg, &suite)?;
    let data = plan
        .seeds
        .iter()
        .map(|&s| Ok((s, suite.seed_data(s, plan.target_train)?)))
        .collect::<Result<Vec<_>>>()?;
    let knobs = match &plan.knobs {
        Knobs::List(v) => v.clone(),
        Knobs::Auto => suite.auto_thresholds(plan.metric, data[0].0, &data[0].1)?,
    };
    let spec = GridSpec {
        metric: plan.metric,
        template: plan.prune,
        knobs,
    };
    let grid = suite.grid(&spec, &data, plan.jobs, &store);
    write_grid_csv(std::slice::from_ref(&grid), args.out.join("grid.csv"))?;
    for (k, v) in grid.curve() {
        println!("{k:>8}  {v:.4}");
    }
    match grid.selected() {
        Some(k) => println!("selected {} = {k} (validation {})", spec.label(), grid.selection_metric),
        None => println!("no grid cell completed"),
    }
    if !grid.failures.is_empty() {
        return Err(Error::Numerical(format!("{} grid cell(s) failed; partial results kept", grid.failures.len())));
    }
    Ok(())
}

fn run_cmd(args: &RunArgs, ablation: bool) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(args, &mut cfg)?;
    let results_path = args.out.join("results.csv");
    if args.resume && results_path.exists() && args.out.join("config.ini").exists() {
        open_run(args, &cfg)?;
        println!("{} is complete; nothing to do", args.out.display());
        return Ok(());
    }
    let store = open_run(args, &cfg)?;
    let suite = Suite::prepare(&cfg, &store, args.jobs)?;
    let mut plan = build_plan(args, &cfg, &suite)?;
    plan.ablation = ablation;
    let report = experiment::run(&suite, &plan, &store)?;

    write_grid_csv(&report.grids, args.out.join("grid.csv"))?;
    write_significance(&report.comparisons, args.out.join("significance.csv"))?;
    let mut scores = Vec::new();
    for r in &report.results {
        let knob = r.prune.map(|p| format!("-{}-{}-{}", p.unit, p.reset, p.knob())).unwrap_or_default();
        scores.push((format!("{}{knob}", r.method.replace(':', "_")), score_rows(&r.eval, r.seed)));
    }
    scores.sort_by(|a, b| a.0.cmp(&b.0));
    for chunk in scores.chunk_by(|a, b| a.0 == b.0) {
        let rows: Vec<_> = chunk.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
        write_scores(&rows, args.out.join("scores").join(format!("{}.csv", chunk[0].0)))?;
    }
    let sel = cfg.eval.selection_metric;
    for c in &report.comparisons {
        println!(
            "{} {:.4} vs {} {:.4} ({sel}): p = {:.4}",
            c.a, c.mean_a, c.b, c.mean_b, c.p_value
        );
    }
    // Written last: its presence marks the run as complete.
    write_results(&report.records(), &results_path)?;
    for row in aggregate(&report.records()).iter().filter(|r| r.metric == sel.as_str()) {
        println!("{:<32} {:<10} {:<6} {:.4}", row.method, row.prune_unit, row.prune_reset, row.mean);
    }
    if !report.failures.is_empty() {
        for f in &report.failures {
            warn!("{f}");
        }
        return Err(Error::Numerical(format!("{} cell(s) failed; partial results kept", report.failures.len())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: Option<&Path>,
    base: &Path,
    task: &Path,
    split: &str,
    config: &Path,
    method: &str,
    seed: u64,
    out: &Path,
    scores: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let base = load_base(base)?;
    let set = match checkpoint {
        Some(p) => load_adapters_for(p, &base)?,
        None => AdapterSet::new(),
    };
    let (name, corpus) = load_task(task)?;
    let examples = match split {
        "train" => &corpus.train,
        "val" => &corpus.val,
        "test" => &corpus.test,
        other => return Err(usage(format!("unknown split `{other}` (train, val, test)"))),
    };
    let eval = evaluate_method(&base, &set, examples, &cfg.eval.metrics, cfg.eval.max_new_tokens)?;
    let mut records = if out.exists() { read_results(out)? } else { Vec::new() };
    records.extend(eval.records(&name, method, seed, None));
    write_results(&records, out)?;
    if let Some(p) = scores {
        write_scores(&score_rows(&eval, seed), p)?;
    }
    for (m, _, v) in &eval.scores {
        println!("{name} {split} {method} {m}: {v:.4}");
    }
    Ok(())
}

fn sigtest(a: &Path, b: &Path, rounds: usize, seed: u64, metric: Metric) -> Result<()> {
    let sa = read_scores(a, metric)?;
    let sb = read_scores(b, metric)?;
    if sa.is_empty() {
        return Err(Error::Contract(format!("{} has no {metric} scores", a.display())));
    }
    let p = approx_randomization(&sa, &sb, rounds, seed)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean_a={:.6} mean_b={:.6} p={p:.6}", mean(&sa), mean(&sb));
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut all = Vec::new();
    let mut by_size: Vec<(usize, Vec<_>)> = Vec::new();
    for dir in runs {
        let records = read_results(dir.join("results.csv"))?;
        let size = match dir.join("config.ini") {
            p if p.exists() => Some(ExperimentConfig::load(&p)?.tasks.target_train),
            _ => None,
        };
        if let Some(n) = size {
            match by_size.iter_mut().find(|(s, _)| *s == n) {
                Some((_, v)) => v.extend(records.iter().cloned()),
                None => by_size.push((n, records.clone())),
            }
        }
        all.extend(records);
    }
    let summary = aggregate(&all);
    write_csv(&summary, out.join("summary.csv"))?;
    println!("{} groups -> {}", summary.len(), out.join("summary.csv").display());

    if by_size.len() > 1 {
        by_size.sort_by_key(|(n, _)| *n);
        #[derive(serde::Serialize)]
        struct CurveRow<'a> {
            train_size: usize,
            metric: &'a str,
            prune_unit: &'a str,
            prune_reset: &'a str,
            mean: f64,
            std: f64,
            n: usize,
        }
        let per_size: Vec<(usize, Vec<_>)> = by_size.iter().map(|(n, r)| (*n, aggregate(r))).collect();
        let mut methods: Vec<&str> = per_size
            .iter()
            .flat_map(|(_, rows)| rows.iter().map(|r| r.method.as_str()))
            .collect();
        methods.sort_unstable();
        methods.dedup();
        for method in methods {
            let rows: Vec<CurveRow> = per_size
                .iter()
                .flat_map(|(n, rows)| {
                    rows.iter().filter(move |r| r.method == method).map(move |r| CurveRow {
                        train_size: *n,
                        metric: &r.metric,
                        prune_unit: &r.prune_unit,
                        prune_reset: &r.prune_reset,
                        mean: r.mean,
                        std: r.std,
                        n: r.n,
                    })
                })
                .collect();
            let path = out.join(format!("curve_{}.csv", method.replace(':', "_")));
            write_csv(&rows, &path)?;
            info!("wrote {}", path.display());
        }
        println!("{} train sizes -> curve_<method>.csv", per_size.len());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks { config, out, force } => gen_tasks(&config, &out, force),
        Command::PretrainBase {
            config,
            out,
            seed,
            force,
        } => pretrain_base_cmd(&config, &out, seed, force),
        Command::TrainAdapter {
            task,
            base,
            config,
            out,
            seed,
            force,
        } => train_adapter(&task, &base, &config, &out, seed, force),
        Command::MergeTrain {
            adapters,
            target,
            base,
            config,
            out,
            seed,
            force,
        } => merge_train_cmd(&adapters, &target, &base, &config, &out, seed, force),
        Command::Grid { run } => grid_cmd(&run),
        Command::Run { run, ablation } => run_cmd(&run, ablation),
        Command::Eval {
            checkpoint,
            base,
            task,
            split,
            config,
            method,
            seed,
            out,
            scores,
        } => eval_cmd(
            checkpoint.as_deref(),
            &base,
            &task,
            &split,
            &config,
            &method,
            seed,
            &out,
            scores.as_deref(),
        ),
        Command::Sigtest {
            a,
            b,
            rounds,
            seed,
            metric,
        } => sigtest(&a, &b, rounds, seed, metric),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
