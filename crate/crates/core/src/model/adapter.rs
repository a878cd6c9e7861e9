use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::base::BaseModel;
use crate::numerics::Matrix;

/// Attention projections that can carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Value => "value",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Projection::Query),
            "value" | "v" => Ok(Projection::Value),
            other => Err(Error::config(format!("unknown projection `{other}`"))),
        }
    }
}

/// One adaptable location: a projection of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub projection: Projection,
}

impl Site {
    pub fn new(layer: usize, projection: Projection) -> Self {
        Self { layer, projection }
    }

    /// `(out, in)` dimensions of the frozen weight at this site.
    pub fn dims(&self, base: &BaseModel) -> Result<(usize, usize)> {
        let layer = base.layers.get(self.layer).ok_or_else(|| {
            Error::config(format!(
                "layer {} does not exist in a {}-layer model",
                self.layer,
                base.layers.len()
            ))
        })?;
        let w = match self.projection {
            Projection::Query => &layer.query,
            Projection::Value => &layer.value,
        };
        Ok(w.shape())
    }

    /// Query and value of every layer.
    pub fn all(base: &BaseModel) -> Vec<Site> {
        (0..base.layers.len())
            .flat_map(|l| [Site::new(l, Projection::Query), Site::new(l, Projection::Value)])
            .collect()
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.projection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub init_std: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.alpha.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("alpha and init_std must be finite, init_std >= 0"));
        }
        Ok(())
    }
}

/// A low-rank pair attached to one site: `ΔW = (alpha / r) · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub task_tag: String,
    pub site: Site,
    /// `r x d_in`
    pub a: Matrix,
    /// `d_out x r`
    pub b: Matrix,
    pub alpha: f32,
    pub dropout: f32,
    /// Seed that produced the creation-time `A`; lets the creation-time
    /// initialisation be rebuilt later.
    pub init_seed: u64,
}

impl AdapterModule {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// The dense `d_out x d_in` update this adapter contributes.
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter invariants guarantee conforming A and B")
            .scale(self.scaling())
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let r = self.a.rows();
        if r == 0 || self.b.cols() != r {
            return Err(Error::shape(format!(
                "adapter {} at {}: A is {}x{}, B is {}x{}",
                self.task_tag,
                self.site,
                self.a.rows(),
                self.a.cols(),
                self.b.rows(),
                self.b.cols()
            )));
        }
        Ok(())
    }

    /// Checks that the delta matches the frozen weight at this site.
    pub fn check_against(&self, base: &BaseModel) -> Result<()> {
        self.check_shapes()?;
        let (out, inp) = self.site.dims(base).map_err(|e| Error::shape(e.to_string()))?;
        if self.a.cols() != inp || self.b.rows() != out {
            return Err(Error::shape(format!(
                "adapter {} at {} has delta {}x{}, base weight is {out}x{inp}",
                self.task_tag,
                self.site,
                self.b.rows(),
                self.a.cols()
            )));
        }
        Ok(())
    }
}

/// Deterministic creation-time values of `A` for a given seed and shape.
pub(crate) fn initial_a(rank: usize, d_in: usize, std: f32, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if std == 0.0 {
        return Matrix::zeros(rank, d_in);
    }
    let normal = Normal::new(0.0f32, std).expect("validated std");
    Matrix::from_raw(rank, d_in, (0..rank * d_in).map(|_| normal.sample(&mut rng)).collect())
}

/// Fresh adapter: `A ~ N(0, init_std²)`, `B = 0`, so the delta starts at
/// exactly zero.
pub fn init_adapter(
    base: &BaseModel,
    task_tag: &str,
    site: Site,
    config: &LoraConfig,
    seed: u64,
) -> Result<AdapterModule> {
    config.validate()?;
    validate_tag(task_tag)?;
    let (out, inp) = site.dims(base)?;
    Ok(AdapterModule {
        task_tag: task_tag.to_string(),
        site,
        a: initial_a(config.rank, inp, config.init_std, seed),
        b: Matrix::zeros(out, config.rank),
        alpha: config.alpha,
        dropout: config.dropout,
        init_seed: seed,
    })
}

pub(crate) fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || tag.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::config(format!(
            "task tag `{tag}` must be non-empty without whitespace or `=`"
        )));
    }
    Ok(())
}

/// Adapters sharing one site, in attachment order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub site: Site,
    pub modules: Vec<AdapterModule>,
}

/// Every adapter attached to a model, grouped into per-site stacks kept in
/// site order. Iteration order over modules is stable and is the order
/// importance scores and prune reports refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    stacks: Vec<AdapterStack>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a module, rejecting a second module with the same task tag at
    /// the same site.
    pub fn insert(&mut self, module: AdapterModule) -> Result<()> {
        module.check_shapes()?;
        let pos = self.stacks.binary_search_by(|s| s.site.cmp(&module.site));
        match pos {
            Ok(i) => {
                let stack = &mut self.stacks[i];
                if stack.modules.iter().any(|m| m.task_tag == module.task_tag) {
                    return Err(Error::config(format!(
                        "site {} already has an adapter for task {}",
                        module.site, module.task_tag
                    )));
                }
                let first = &stack.modules[0];
                if first.a.cols() != module.a.cols() || first.b.rows() != module.b.rows() {
                    return Err(Error::shape(format!(
                        "adapter {} does not match the other adapters at {}",
                        module.task_tag, module.site
                    )));
                }
                stack.modules.push(module);
            }
            Err(i) => self.stacks.insert(
                i,
                AdapterStack {
                    site: module.site,
                    modules: vec![module],
                },
            ),
        }
        Ok(())
    }

    /// Union of several sets, e.g. adapters pre-trained on different tasks.
    pub fn merged<'a>(sets: impl IntoIterator<Item = &'a AdapterSet>) -> Result<AdapterSet> {
        let mut out = AdapterSet::new();
        for set in sets {
            for m in set.modules() {
                out.insert(m.clone())?;
            }
        }
        Ok(out)
    }

    pub fn stacks(&self) -> &[AdapterStack] {
        &self.stacks
    }

    pub fn stack(&self, site: Site) -> Option<&AdapterStack> {
        self.stacks.iter().find(|s| s.site == site)
    }

    pub fn modules(&self) -> impl Iterator<Item = &AdapterModule> {
        self.stacks.iter().flat_map(|s| s.modules.iter())
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut AdapterModule> {
        self.stacks.iter_mut().flat_map(|s| s.modules.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.stacks.iter().map(|s| s.modules.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameter_count(&self) -> usize {
        self.modules().map(AdapterModule::parameter_count).sum()
    }

    /// Distinct task tags in first-seen order.
    pub fn task_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for m in self.modules() {
            if !tags.contains(&m.task_tag) {
                tags.push(m.task_tag.clone());
            }
        }
        tags
    }

    /// Keeps only the modules whose tag satisfies `keep`.
    pub fn filter_tags(&self, keep: impl Fn(&str) -> bool) -> AdapterSet {
        let stacks = self
            .stacks
            .iter()
            .filter_map(|s| {
                let modules: Vec<_> = s.modules.iter().filter(|m| keep(&m.task_tag)).cloned().collect();
                (!modules.is_empty()).then_some(AdapterStack {
                    site: s.site,
                    modules,
                })
            })
            .collect();
        AdapterSet { stacks }
    }

    pub fn check_against(&self, base: &BaseModel) -> Result<()> {
        self.modules().try_for_each(|m| m.check_against(base))
    }

    /// Multiplies each task's `B` by its weight, so the forward pass computes
    /// `Σ w_task · (alpha/r) · B A x`. Tags missing from `weights` keep
    /// weight 1.
    pub fn scaled_by_task(&self, weights: &[(String, f32)]) -> AdapterSet {
        let mut out = self.clone();
        for m in out.modules_mut() {
            if let Some((_, w)) = weights.iter().find(|(t, _)| *t == m.task_tag) {
                m.b = m.b.scale(*w);
            }
        }
        out
    }
}

/// Adapter values captured when a merge session starts; the reference for
/// `Init` resets.
#[derive(Clone, Debug, PartialEq)]
pub struct InitSnapshot {
    values: Vec<(Matrix, Matrix)>,
}

impl InitSnapshot {
    /// Copies the current `(A, B)` of every module.
    pub fn capture(set: &AdapterSet) -> Self {
        Self {
            values: set.modules().map(|m| (m.a.clone(), m.b.clone())).collect(),
        }
    }

    /// Rebuilds each module's creation-time initialisation from its seed:
    /// the seeded gaussian `A` (with the given std) and an all-zero `B`.
    pub fn creation_time(set: &AdapterSet, init_std: f32) -> Self {
        Self {
            values: set
                .modules()
                .map(|m| {
                    (
                        initial_a(m.rank(), m.a.cols(), init_std, m.init_seed),
                        Matrix::zeros(m.b.rows(), m.b.cols()),
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(A, B)` of the `i`-th module in set iteration order.
    pub fn get(&self, i: usize) -> Option<(&Matrix, &Matrix)> {
        self.values.get(i).map(|(a, b)| (a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::base::ModelConfig;

    fn base() -> BaseModel {
        BaseModel::random(ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let base = base();
        let m = init_adapter(&base, "t", Site::new(0, Projection::Query), &LoraConfig::default(), 9).unwrap();
        assert_eq!(m.delta(), Matrix::zeros(64, 64));
        assert!(m.a.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let base = base();
        let site = Site::new(1, Projection::Value);
        let a = init_adapter(&base, "t", site, &LoraConfig::default(), 11).unwrap();
        let b = init_adapter(&base, "t", site, &LoraConfig::default(), 11).unwrap();
        assert_eq!(a.a.as_slice(), b.a.as_slice());
    }

    #[test]
    fn shapes_follow_rank_and_width() {
        let base = base();
        let m = init_adapter(&base, "t", Site::new(0, Projection::Value), &LoraConfig::default(), 1).unwrap();
        assert_eq!(m.a.shape(), (8, 64));
        assert_eq!(m.b.shape(), (64, 8));
        assert_eq!(m.scaling(), 4.0);
    }

    #[test]
    fn unknown_site_is_configuration_error() {
        let base = base();
        let err = init_adapter(&base, "t", Site::new(7, Projection::Query), &LoraConfig::default(), 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_tag_at_site_is_rejected() {
        let base = base();
        let site = Site::new(0, Projection::Query);
        let mut set = AdapterSet::new();
        set.insert(init_adapter(&base, "a", site, &LoraConfig::default(), 1).unwrap()).unwrap();
        set.insert(init_adapter(&base, "b", site, &LoraConfig::default(), 2).unwrap()).unwrap();
        assert!(set.insert(init_adapter(&base, "a", site, &LoraConfig::default(), 3).unwrap()).is_err());
        assert_eq!(set.len(), 2);
        assert_eq!(set.stacks().len(), 1);
    }

    #[test]
    fn modules_iterate_in_site_order() {
        let base = base();
        let mut set = AdapterSet::new();
        for site in Site::all(&base).into_iter().rev() {
            set.insert(init_adapter(&base, "t", site, &LoraConfig::default(), 0).unwrap()).unwrap();
        }
        let sites: Vec<Site> = set.modules().map(|m| m.site).collect();
        let mut sorted = sites.clone();
        sorted.sort();
        assert_eq!(sites, sorted);
    }

    #[test]
    fn creation_snapshot_rebuilds_initial_a() {
        let base = base();
        let config = LoraConfig::default();
        let fresh = init_adapter(&base, "t", Site::new(0, Projection::Query), &config, 5).unwrap();
        let mut trained = fresh.clone();
        trained.a = trained.a.scale(3.0);
        trained.b = Matrix::filled(64, 8, 0.5);
        let mut set = AdapterSet::new();
        set.insert(trained).unwrap();
        let snap = InitSnapshot::creation_time(&set, config.init_std);
        let (a, b) = snap.get(0).unwrap();
        assert_eq!(a, &fresh.a);
        assert_eq!(b, &fresh.b);
    }
}
