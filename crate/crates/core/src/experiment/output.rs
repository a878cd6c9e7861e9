use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Comparison, Grid};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::trainer::{EvalRecord, Evaluation};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes `results.csv` rows (header included).
pub fn write_results(records: &[EvalRecord], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), records)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    read_rows(path.as_ref())
}

#[derive(Serialize)]
struct GridRow<'a> {
    importance: &'a str,
    prune_unit: String,
    prune_reset: String,
    ratio_or_threshold: f64,
    seed: Option<u64>,
    metric: &'a str,
    value: f64,
}

/// Per-cell validation scores followed by one seed-less mean row per knob.
pub fn write_grid_csv(grids: &[Grid], path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::new();
    for g in grids {
        let t = &g.spec.template;
        let row = |knob, seed, value| GridRow {
            importance: g.spec.metric.as_str(),
            prune_unit: t.unit.to_string(),
            prune_reset: t.reset.to_string(),
            ratio_or_threshold: knob,
            seed,
            metric: g.selection_metric.as_str(),
            value,
        };
        rows.extend(g.cells.iter().map(|c| row(c.prune.knob(), Some(c.seed), c.val_score)));
        rows.extend(g.curve().into_iter().map(|(k, v)| row(k, None, v)));
    }
    write_rows(path.as_ref(), rows)
}

pub fn write_significance(comparisons: &[Comparison], path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        a: &'a str,
        b: &'a str,
        metric: &'a str,
        mean_a: f64,
        mean_b: f64,
        p_value: f64,
    }
    write_rows(
        path.as_ref(),
        comparisons.iter().map(|c| Row {
            a: &c.a,
            b: &c.b,
            metric: c.metric.as_str(),
            mean_a: c.mean_a,
            mean_b: c.mean_b,
            p_value: c.p_value,
        }),
    )
}

/// Mean of one (task, method, metric, pruning unit, reset) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub metric: String,
    pub prune_unit: String,
    pub prune_reset: String,
    /// Distinct knob values in the group, `;`-separated.
    pub ratio_or_threshold: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Groups `records` and averages each group over its rows (seeds and runs).
pub fn aggregate(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str, &str, &str, &str), (Vec<&str>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((&r.task, &r.method, &r.metric, &r.prune_unit, &r.prune_reset))
            .or_default();
        if !g.0.contains(&r.ratio_or_threshold.as_str()) {
            g.0.push(&r.ratio_or_threshold);
        }
        g.1.push(r.value);
    }
    groups
        .into_iter()
        .map(|((task, method, metric, unit, reset), (knobs, values))| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            SummaryRow {
                task: task.into(),
                method: method.into(),
                metric: metric.into(),
                prune_unit: unit.into(),
                prune_reset: reset.into(),
                ratio_or_threshold: knobs.join(";"),
                mean,
                std: var.sqrt(),
                n,
            }
        })
        .collect()
}

/// One per-example score, the unit of the paired significance test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub seed: u64,
    pub index: usize,
    pub metric: String,
    pub score: f64,
}

/// Per-example scores of `eval` for every metric it carries.
pub fn score_rows(eval: &Evaluation, seed: u64) -> Vec<ScoreRow> {
    eval.scores
        .iter()
        .flat_map(|(m, set, _)| {
            set.scores.iter().enumerate().map(move |(index, &score)| ScoreRow {
                seed,
                index,
                metric: m.to_string(),
                score,
            })
        })
        .collect()
}

pub fn write_scores(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

/// Scores of one metric in file order.
pub fn read_scores(path: impl AsRef<Path>, metric: Metric) -> Result<Vec<f64>> {
    let rows: Vec<ScoreRow> = read_rows(path.as_ref())?;
    Ok(rows
        .into_iter()
        .filter(|r| r.metric == metric.as_str())
        .map(|r| r.score)
        .collect())
}

/// Writes any serializable rows as CSV.
pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, value: f64) -> EvalRecord {
        EvalRecord {
            task: "compose".into(),
            method: method.into(),
            seed,
            metric: "rouge_l".into(),
            value,
            prune_unit: String::new(),
            prune_reset: String::new(),
            ratio_or_threshold: String::new(),
        }
    }

    #[test]
    fn aggregate_means_per_group() {
        let rows = aggregate(&[rec("merge", 0, 0.5), rec("merge", 1, 0.7), rec("zero_shot", 0, 0.1)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean - 0.6).abs() < 1e-12);
        assert_eq!(rows[0].n, 2);
        assert_eq!(rows[1].mean, 0.1);
        assert_eq!(rows[1].std, 0.0);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let rows = vec![rec("merge", 0, 0.25), rec("lora_single:reverse", 2, 1.0)];
        write_results(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task,method,seed,metric,value,prune_unit,prune_reset,ratio_or_threshold\n"));
        assert_eq!(read_results(&p).unwrap(), rows);
    }
}
