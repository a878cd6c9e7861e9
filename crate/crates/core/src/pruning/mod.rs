//! Reset-and-retrain pruning of adapter parameters.
//!
//! Pruned entries are overwritten (with zero or their snapshot value) but
//! stay trainable; there is no persistent mask.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::model::{AdapterSet, InitSnapshot};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PruneUnit {
    /// The lowest-scoring s% of each matrix.
    Parameter,
    /// Whole adapters whose mean score is below τ.
    Module,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResetMode {
    Zero,
    Init,
}

/// Where `ResetMode::Init` takes its values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitSource {
    /// Adapter values when the merge session starts.
    MergeStart,
    /// Fresh-initialisation values (A from its seed, B zero).
    Creation,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $s),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`; expected one of: ", $($s, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

str_enum!(PruneUnit { Parameter => "parameter", Module => "module" });
str_enum!(ResetMode { Zero => "zero", Init => "init" });
str_enum!(InitSource { MergeStart => "merge_start", Creation => "creation" });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneConfig {
    pub enabled: bool,
    pub unit: PruneUnit,
    pub reset: ResetMode,
    /// Percentage of entries reset per matrix (parameter unit).
    pub ratio_percent: f64,
    /// Mean-importance cutoff (module unit).
    pub threshold: f64,
    pub init_source: InitSource,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: false,
            unit: PruneUnit::Parameter,
            reset: ResetMode::Zero,
            ratio_percent: 0.0,
            threshold: 0.0,
            init_source: InitSource::MergeStart,
        }
    }
}

impl PruneConfig {
    pub fn parameter(ratio_percent: f64, reset: ResetMode) -> Self {
        PruneConfig {
            enabled: true,
            unit: PruneUnit::Parameter,
            reset,
            ratio_percent,
            ..PruneConfig::default()
        }
    }

    pub fn module(threshold: f64, reset: ResetMode) -> Self {
        PruneConfig {
            enabled: true,
            unit: PruneUnit::Module,
            reset,
            threshold,
            ..PruneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.ratio_percent) {
            return Err(Error::Config(format!("pruning ratio {}% outside [0, 100]", self.ratio_percent)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("module threshold {} must be >= 0", self.threshold)));
        }
        Ok(())
    }

    /// The active knob: the ratio for parameter pruning, τ for module pruning.
    pub fn knob(&self) -> f64 {
        match self.unit {
            PruneUnit::Parameter => self.ratio_percent,
            PruneUnit::Module => self.threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AdapterPruneReport {
    pub entries_reset: usize,
    pub module_reset: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PruneReport {
    pub per_adapter: Vec<AdapterPruneReport>,
    pub entries_reset: usize,
    pub modules_reset: usize,
    pub total_entries: usize,
}

impl PruneReport {
    /// No-op report for `set` (pruning disabled or skipped this step).
    pub fn empty(set: &AdapterSet) -> Self {
        PruneReport {
            per_adapter: vec![AdapterPruneReport::default(); set.len()],
            entries_reset: 0,
            modules_reset: 0,
            total_entries: set.parameter_count(),
        }
    }

    /// Reset entries as a percentage of all adapter entries.
    pub fn realized_pct(&self) -> f64 {
        if self.total_entries == 0 {
            return 0.0;
        }
        100.0 * self.entries_reset as f64 / self.total_entries as f64
    }
}

/// `⌊s%·size⌋`, with a small epsilon so e.g. 30% of 10 is 3, not 2.
pub fn prune_count(ratio_percent: f64, size: usize) -> usize {
    ((ratio_percent * size as f64 / 100.0 + 1e-9).floor() as usize).min(size)
}

/// Flat indices of the `k` lowest scores, ties broken by ascending index.
pub fn lowest_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn check_inputs(set: &AdapterSet, scores: &ImportanceScores, snapshot: &InitSnapshot, config: &PruneConfig) -> Result<()> {
    config.validate()?;
    scores.check_against(set)?;
    if config.reset == ResetMode::Init {
        if snapshot.len() != set.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} adapters, set has {}",
                snapshot.len(),
                set.len()
            )));
        }
        for (i, m) in set.modules().enumerate() {
            let (a, b) = snapshot.get(i).expect("length checked");
            if a.shape() != m.a.shape() || b.shape() != m.b.shape() {
                return Err(Error::Contract(format!("snapshot shapes differ for {} at {}", m.task_tag, m.site)));
            }
        }
    }
    Ok(())
}

fn reset_entries(w: &mut Matrix, init: Option<&Matrix>, idx: &[usize]) {
    let data = w.as_mut_slice();
    match init {
        Some(init) => {
            let src = init.as_slice();
            for &i in idx {
                data[i] = src[i];
            }
        }
        None => {
            for &i in idx {
                data[i] = 0.0;
            }
        }
    }
}

/// Resets the `⌊s%·size⌋` lowest-importance entries of every `A` and `B`
/// independently.
pub fn prune_parameters(
    set: &mut AdapterSet,
    scores: &ImportanceScores,
    config: &PruneConfig,
    snapshot: &InitSnapshot,
) -> Result<PruneReport> {
    if config.unit != PruneUnit::Parameter {
        return Err(Error::contract("prune_parameters called with module-level config"));
    }
    check_inputs(set, scores, snapshot, config)?;
    let mut report = PruneReport::empty(set);
    for (i, m) in set.modules_mut().enumerate() {
        let s = &scores.per_adapter[i];
        let init = (config.reset == ResetMode::Init).then(|| snapshot.get(i).expect("checked"));
        let mut count = 0;
        for (w, sc, init) in [(&mut m.a, &s.a, init.map(|p| p.0)), (&mut m.b, &s.b, init.map(|p| p.1))] {
            let idx = lowest_k(sc.as_slice(), prune_count(config.ratio_percent, w.len()));
            reset_entries(w, init, &idx);
            count += idx.len();
        }
        report.per_adapter[i].entries_reset = count;
        report.entries_reset += count;
    }
    Ok(report)
}

/// Resets every adapter whose mean importance over `A` and `B` is below τ.
pub fn prune_modules(
    set: &mut AdapterSet,
    scores: &ImportanceScores,
    config: &PruneConfig,
    snapshot: &InitSnapshot,
) -> Result<PruneReport> {
    if config.unit != PruneUnit::Module {
        return Err(Error::contract("prune_modules called with parameter-level config"));
    }
    check_inputs(set, scores, snapshot, config)?;
    let mut report = PruneReport::empty(set);
    for (i, m) in set.modules_mut().enumerate() {
        if scores.per_adapter[i].mean() >= config.threshold {
            continue;
        }
        match config.reset {
            ResetMode::Zero => {
                m.a.as_mut_slice().fill(0.0);
                m.b.as_mut_slice().fill(0.0);
            }
            ResetMode::Init => {
                let (a, b) = snapshot.get(i).expect("checked");
                m.a = a.clone();
                m.b = b.clone();
            }
        }
        let n = m.a.len() + m.b.len();
        report.per_adapter[i] = AdapterPruneReport {
            entries_reset: n,
            module_reset: true,
        };
        report.entries_reset += n;
        report.modules_reset += 1;
    }
    Ok(report)
}

/// Dispatches on `config.unit`; a disabled config leaves `set` untouched.
pub fn prune(
    set: &mut AdapterSet,
    scores: &ImportanceScores,
    config: &PruneConfig,
    snapshot: &InitSnapshot,
) -> Result<PruneReport> {
    if !config.enabled {
        return Ok(PruneReport::empty(set));
    }
    match config.unit {
        PruneUnit::Parameter => prune_parameters(set, scores, config, snapshot),
        PruneUnit::Module => prune_modules(set, scores, config, snapshot),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::MatrixPair;
    use crate::model::{AdapterModule, Projection, Site};

    fn one(a: Matrix, b: Matrix, layer: usize) -> AdapterModule {
        AdapterModule {
            task_tag: "t".into(),
            site: Site::new(layer, Projection::Query),
            a,
            b,
            alpha: 1.0,
            dropout: 0.0,
            init_seed: 0,
        }
    }

    fn set_of(mods: Vec<AdapterModule>) -> AdapterSet {
        let mut s = AdapterSet::new();
        for m in mods {
            s.insert(m).unwrap();
        }
        s
    }

    #[test]
    fn hand_case_resets_index_zero_and_two() {
        let w = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut set = set_of(vec![one(w.clone(), w, 0)]);
        let sc = Matrix::from_vec(2, 2, vec![2.0, 2.0, 0.0, 6.0]).unwrap();
        let scores = ImportanceScores {
            per_adapter: vec![MatrixPair { a: sc.clone(), b: sc }],
        };
        let snap = InitSnapshot::capture(&set);
        let r = prune_parameters(&mut set, &scores, &PruneConfig::parameter(50.0, ResetMode::Zero), &snap).unwrap();
        let m = set.modules().next().unwrap();
        assert_eq!(m.a.as_slice(), &[0.0, 6.0, 0.0, 8.0]);
        assert_eq!(r.entries_reset, 4);
        assert!((r.realized_pct() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn count_formula() {
        assert_eq!(prune_count(30.0, 10), 3);
        assert_eq!(prune_count(50.0, 3), 1);
        assert_eq!(prune_count(100.0, 7), 7);
        assert_eq!(prune_count(0.0, 7), 0);
    }

    #[test]
    fn module_threshold_hand_case() {
        let mk = |v: f32, layer| {
            let s = MatrixPair {
                a: Matrix::filled(1, 2, v),
                b: Matrix::filled(2, 1, v),
            };
            (one(Matrix::filled(1, 2, 1.0), Matrix::filled(2, 1, 1.0), layer), s)
        };
        let (m1, s1) = mk(0.003, 0);
        let (m2, s2) = mk(0.012, 1);
        let mut set = set_of(vec![m1, m2]);
        let scores = ImportanceScores {
            per_adapter: vec![s1, s2],
        };
        let snap = InitSnapshot::capture(&set);
        let r = prune_modules(&mut set, &scores, &PruneConfig::module(0.008, ResetMode::Zero), &snap).unwrap();
        assert_eq!(r.modules_reset, 1);
        let mods: Vec<_> = set.modules().collect();
        assert!(mods[0].a.as_slice().iter().all(|&v| v == 0.0));
        assert!(mods[1].a.as_slice().iter().all(|&v| v == 1.0));

        let r0 = prune_modules(&mut set, &scores, &PruneConfig::module(0.0, ResetMode::Zero), &snap).unwrap();
        assert_eq!(r0.modules_reset, 0);
    }

    #[test]
    fn init_reset_restores_snapshot() {
        let start = one(Matrix::filled(2, 2, 3.0), Matrix::filled(2, 2, 4.0), 0);
        let mut set = set_of(vec![start]);
        let snap = InitSnapshot::capture(&set);
        for m in set.modules_mut() {
            m.a = Matrix::filled(2, 2, 9.0);
        }
        let scores = ImportanceScores {
            per_adapter: vec![MatrixPair {
                a: Matrix::zeros(2, 2),
                b: Matrix::zeros(2, 2),
            }],
        };
        prune_parameters(&mut set, &scores, &PruneConfig::parameter(100.0, ResetMode::Init), &snap).unwrap();
        let m = set.modules().next().unwrap();
        assert_eq!(m.a.as_slice(), &[3.0; 4]);
        assert_eq!(m.b.as_slice(), &[4.0; 4]);
    }

    #[test]
    fn wrong_score_count_is_contract_error() {
        let mut set = set_of(vec![one(Matrix::zeros(1, 1), Matrix::zeros(1, 1), 0)]);
        let snap = InitSnapshot::capture(&set);
        let scores = ImportanceScores { per_adapter: vec![] };
        assert!(matches!(
            prune_parameters(&mut set, &scores, &PruneConfig::parameter(10.0, ResetMode::Zero), &snap),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn parse_names() {
        assert_eq!("module".parse::<PruneUnit>().unwrap(), PruneUnit::Module);
        assert_eq!("init".parse::<ResetMode>().unwrap(), ResetMode::Init);
        assert!("zeros".parse::<ResetMode>().is_err());
    }
}
