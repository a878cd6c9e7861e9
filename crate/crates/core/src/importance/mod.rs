//! Per-entry importance of adapter parameters.
//!
//! Two metrics: the input metric `|W_ij|·‖X_j‖₂`, where `‖X_j‖₂` is the L2
//! norm of input feature `j` over every validation token position, and the
//! gradient metric `|W_ij·∂L/∂W_ij|` smoothed by [`SmootherState`].
//!
//! For `A` the input features are the site input `x`; for `B` they are the
//! rank-`r` intermediate `a = x·Aᵀ`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{self, AdapterModule, AdapterSet, BaseModel, Batch};
use crate::numerics::Matrix;
use crate::tasks::Example;

/// One value per entry of an adapter's `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl MatrixPair {
    pub fn zeros_like(m: &AdapterModule) -> Self {
        MatrixPair {
            a: Matrix::zeros(m.a.rows(), m.a.cols()),
            b: Matrix::zeros(m.b.rows(), m.b.cols()),
        }
    }

    /// Mean over the entries of `a` and `b` jointly.
    pub fn mean(&self) -> f64 {
        let n = self.a.len() + self.b.len();
        if n == 0 {
            return 0.0;
        }
        let s: f64 = self.a.as_slice().iter().chain(self.b.as_slice()).map(|&v| f64::from(v)).sum();
        s / n as f64
    }

    fn shape_matches(&self, m: &AdapterModule) -> bool {
        self.a.shape() == m.a.shape() && self.b.shape() == m.b.shape()
    }
}

/// Scores aligned with [`AdapterSet::modules`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub per_adapter: Vec<MatrixPair>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.per_adapter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_adapter.is_empty()
    }

    /// Errors unless there is one correctly shaped entry per adapter.
    pub fn check_against(&self, set: &AdapterSet) -> Result<()> {
        if self.per_adapter.len() != set.len() {
            return Err(Error::Contract(format!(
                "{} score entries for {} adapters",
                self.per_adapter.len(),
                set.len()
            )));
        }
        for (s, m) in self.per_adapter.iter().zip(set.modules()) {
            if !s.shape_matches(m) {
                return Err(Error::Contract(format!(
                    "scores for {} at {} have shapes {:?}/{:?}, adapter has {:?}/{:?}",
                    m.task_tag,
                    m.site,
                    s.a.shape(),
                    s.b.shape(),
                    m.a.shape(),
                    m.b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Feature norms for one adapter: `input` has `d_in` entries, `inner` has `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNorms {
    pub input: Vec<f32>,
    pub inner: Vec<f32>,
}

/// Norms aligned with [`AdapterSet::modules`].
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationNorms {
    pub per_adapter: Vec<AdapterNorms>,
}

/// Running sums of squares; partial accumulators over disjoint shards can be
/// merged before [`NormAccumulator::finish`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormAccumulator {
    input: Vec<Vec<f64>>,
    inner: Vec<Vec<f64>>,
    positions: usize,
}

fn add_column_squares(acc: &mut [f64], m: &Matrix) {
    for r in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += f64::from(v) * f64::from(v);
        }
    }
}

impl NormAccumulator {
    pub fn new(set: &AdapterSet) -> Self {
        NormAccumulator {
            input: set.modules().map(|m| vec![0.0; m.a.cols()]).collect(),
            inner: set.modules().map(|m| vec![0.0; m.rank()]).collect(),
            positions: 0,
        }
    }

    /// Adds every token position of `examples` (teacher-forced, evaluation mode).
    pub fn accumulate(&mut self, base: &BaseModel, set: &AdapterSet, examples: &[Example]) -> Result<()> {
        if examples.is_empty() {
            return Ok(());
        }
        if set.len() != self.input.len() {
            return Err(Error::contract("accumulator was built for a different adapter set"));
        }
        let batch = Batch::teacher_forced(
            examples.iter().map(|e| (&e.input[..], &e.target[..])),
            base.config.max_len,
        )?;
        let inputs = model::site_inputs(base, set, &batch)?;
        for (i, m) in set.modules().enumerate() {
            let x = &inputs[m.site.layer];
            add_column_squares(&mut self.input[i], x);
            add_column_squares(&mut self.inner[i], &x.matmul_t(&m.a)?);
        }
        self.positions += batch.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        let same = self.input.len() == other.input.len()
            && self.input.iter().zip(&other.input).all(|(a, b)| a.len() == b.len())
            && self.inner.iter().zip(&other.inner).all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(Error::contract("cannot merge accumulators of different adapter sets"));
        }
        for (a, b) in self.input.iter_mut().zip(&other.input).chain(self.inner.iter_mut().zip(&other.inner)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.positions += other.positions;
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn finish(&self) -> Result<ActivationNorms> {
        if self.positions == 0 {
            return Err(Error::contract("activation norms need at least one validation example"));
        }
        let root = |v: &Vec<f64>| v.iter().map(|s| s.sqrt() as f32).collect();
        Ok(ActivationNorms {
            per_adapter: self
                .input
                .iter()
                .zip(&self.inner)
                .map(|(i, a)| AdapterNorms {
                    input: root(i),
                    inner: root(a),
                })
                .collect(),
        })
    }
}

/// `sqrt(Σ x_j²)` over every token position of the validation examples.
pub fn collect_activation_norms(base: &BaseModel, set: &AdapterSet, val: &[Example]) -> Result<ActivationNorms> {
    if val.is_empty() {
        return Err(Error::contract("activation norms need a non-empty validation set"));
    }
    let mut acc = NormAccumulator::new(set);
    acc.accumulate(base, set, val)?;
    acc.finish()
}

fn scale_columns(w: &Matrix, norms: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for ((o, &v), &n) in out.row_mut(r).iter_mut().zip(w.row(r)).zip(norms) {
            *o = v.abs() * n;
        }
    }
    out
}

/// Input metric for one adapter.
pub fn importance_input(adapter: &AdapterModule, norms: &AdapterNorms) -> Result<MatrixPair> {
    if norms.input.len() != adapter.a.cols() || norms.inner.len() != adapter.b.cols() {
        return Err(Error::Contract(format!(
            "norms of widths {}/{} do not fit adapter {} at {} ({:?}, {:?})",
            norms.input.len(),
            norms.inner.len(),
            adapter.task_tag,
            adapter.site,
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    Ok(MatrixPair {
        a: scale_columns(&adapter.a, &norms.input),
        b: scale_columns(&adapter.b, &norms.inner),
    })
}

pub fn input_importance(set: &AdapterSet, norms: &ActivationNorms) -> Result<ImportanceScores> {
    if norms.per_adapter.len() != set.len() {
        return Err(Error::Contract(format!(
            "norms cover {} adapters, set has {}",
            norms.per_adapter.len(),
            set.len()
        )));
    }
    let per_adapter = set
        .modules()
        .zip(&norms.per_adapter)
        .map(|(m, n)| importance_input(m, n))
        .collect::<Result<_>>()?;
    Ok(ImportanceScores { per_adapter })
}

/// Raw gradient metric `|W ⊙ ∂L/∂W|` for one adapter.
pub fn importance_grad_raw(adapter: &AdapterModule, grads: &MatrixPair) -> Result<MatrixPair> {
    if !grads.shape_matches(adapter) {
        return Err(Error::Contract(format!(
            "gradient shapes {:?}/{:?} do not fit adapter {} at {}",
            grads.a.shape(),
            grads.b.shape(),
            adapter.task_tag,
            adapter.site
        )));
    }
    let abs_prod = |w: &Matrix, g: &Matrix| w.zip_map(g, |x, y| (x * y).abs());
    Ok(MatrixPair {
        a: abs_prod(&adapter.a, &grads.a),
        b: abs_prod(&adapter.b, &grads.b),
    })
}

/// `grads` must hold one entry per adapter; a missing one is a contract error.
pub fn grad_importance(set: &AdapterSet, grads: &[MatrixPair]) -> Result<ImportanceScores> {
    if grads.len() != set.len() {
        return Err(Error::Contract(format!(
            "gradients for {} of {} adapters",
            grads.len(),
            set.len()
        )));
    }
    let per_adapter = set
        .modules()
        .zip(grads)
        .map(|(m, g)| importance_grad_raw(m, g))
        .collect::<Result<_>>()?;
    Ok(ImportanceScores { per_adapter })
}

/// Exponential moving averages of importance (`Ī`) and of its deviation
/// (`Ū`); the smoothed score is `Ī·Ū`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherState {
    pub beta1: f32,
    pub beta2: f32,
    pub mean: Vec<MatrixPair>,
    pub uncertainty: Vec<MatrixPair>,
    /// Observations folded in so far (the initialising one included).
    pub step: u64,
}

impl SmootherState {
    pub fn new(beta1: f32, beta2: f32) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("smoother {name} = {b} outside (0, 1)")));
            }
        }
        Ok(SmootherState {
            beta1,
            beta2,
            mean: Vec::new(),
            uncertainty: Vec::new(),
            step: 0,
        })
    }

    /// True once at least one update beyond the initialising observation
    /// has been folded in, i.e. `Ū` carries information.
    pub fn is_warm(&self) -> bool {
        self.step > 1
    }

    /// Folds in `scores` and returns `S_t = Ī·Ū`. The first call
    /// initialises `Ī = I`, `Ū = 0` (so returns all zeros).
    pub fn smooth(&mut self, scores: &ImportanceScores) -> Result<ImportanceScores> {
        if self.step == 0 {
            self.mean = scores.per_adapter.clone();
            self.uncertainty = scores
                .per_adapter
                .iter()
                .map(|p| MatrixPair {
                    a: Matrix::zeros(p.a.rows(), p.a.cols()),
                    b: Matrix::zeros(p.b.rows(), p.b.cols()),
                })
                .collect();
        } else {
            if scores.per_adapter.len() != self.mean.len()
                || scores
                    .per_adapter
                    .iter()
                    .zip(&self.mean)
                    .any(|(s, m)| s.a.shape() != m.a.shape() || s.b.shape() != m.b.shape())
            {
                return Err(Error::contract("importance shapes changed between smoother steps"));
            }
            let (b1, b2) = (self.beta1, self.beta2);
            for ((i, mean), unc) in scores.per_adapter.iter().zip(&mut self.mean).zip(&mut self.uncertainty) {
                for (iv, mv, uv) in [(&i.a, &mut mean.a, &mut unc.a), (&i.b, &mut mean.b, &mut unc.b)] {
                    for ((&x, m), u) in iv.as_slice().iter().zip(mv.as_mut_slice()).zip(uv.as_mut_slice()) {
                        *m = b1 * *m + (1.0 - b1) * x;
                        *u = b2 * *u + (1.0 - b2) * (x - *m).abs();
                    }
                }
            }
        }
        self.step += 1;
        Ok(self.score())
    }

    /// Current `Ī·Ū`.
    pub fn score(&self) -> ImportanceScores {
        ImportanceScores {
            per_adapter: self
                .mean
                .iter()
                .zip(&self.uncertainty)
                .map(|(m, u)| MatrixPair {
                    a: m.a.hadamard(&u.a).expect("same shape"),
                    b: m.b.hadamard(&u.b).expect("same shape"),
                })
                .collect(),
        }
    }
}

/// One row per entry: `layer_id,projection,task_tag,matrix,row,col,score`.
pub fn write_scores_csv(set: &AdapterSet, scores: &ImportanceScores, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    scores.check_against(set)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["layer_id", "projection", "task_tag", "matrix", "row", "col", "score"])
        .map_err(csv_err)?;
    for (m, s) in set.modules().zip(&scores.per_adapter) {
        for (name, mat) in [("A", &s.a), ("B", &s.b)] {
            for r in 0..mat.rows() {
                for (c, v) in mat.row(r).iter().enumerate() {
                    w.write_record([
                        m.site.layer.to_string(),
                        m.site.projection.to_string(),
                        m.task_tag.clone(),
                        name.to_string(),
                        r.to_string(),
                        c.to_string(),
                        v.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
