#![allow(dead_code)]

pub mod reference;

use almp::model::{AdapterSet, BaseModel, Batch, LoraConfig, ModelConfig};
use almp::numerics::Matrix;
use almp::trainer::fresh_adapters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default-shaped random base with one adapter per site whose `A` and `B`
/// are both non-zero, so every adapter entry has a non-trivial gradient.
pub fn random_setup(seed: u64) -> (BaseModel, AdapterSet) {
    let base = BaseModel::random(ModelConfig::default(), seed).unwrap();
    let mut set = fresh_adapters(&base, "t", &LoraConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for m in set.modules_mut() {
        let (r, c) = m.b.shape();
        m.b = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.05..0.05)).collect()).unwrap();
    }
    (base, set)
}

/// A teacher-forced batch of random sequences over the symbol ids.
pub fn random_batch(base: &BaseModel, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = base.config.vocab_size as u32;
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let input: Vec<u32> = (0..len).map(|_| rng.gen_range(4..v)).collect();
            let target: Vec<u32> = (0..len).map(|_| rng.gen_range(4..v)).collect();
            (input, target)
        })
        .collect();
    Batch::teacher_forced(pairs.iter().map(|(a, b)| (&a[..], &b[..])), base.config.max_len).unwrap()
}

/// Outcome of comparing tape gradients with central differences of the f64
/// reference loss on randomly probed adapter entries.
#[derive(Debug)]
pub struct GradCheck {
    pub probes: usize,
    /// max |a − n| / max(|a|, |n|, ‖n‖∞): error relative to the gradient scale.
    pub max_scaled: f64,
    /// ‖a − n‖₂ / ‖n‖₂ over the probes.
    pub vector_rel: f64,
    /// max |a − n| / max(|a|, |n|), unfloored.
    pub max_pointwise: f64,
}

pub fn gradient_check(seed: u64, probes: usize, eps: f64) -> GradCheck {
    use almp::numerics::finite_diff_at;
    use almp::trainer::adapter_gradients;
    use reference::{flatten, ref_adapters, ref_loss, unflatten};

    let (base, set) = random_setup(seed);
    let batch = random_batch(&base, 2, seed + 1);
    let (_, grads) = adapter_gradients(&base, &set, &batch).unwrap();
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.a.as_slice().iter().chain(g.b.as_slice()))
        .map(|&v| f64::from(v))
        .collect();
    let like = ref_adapters(&set);
    let flat = flatten(&like);
    assert_eq!(flat.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let coords = rand::seq::index::sample(&mut rng, flat.len(), probes).into_vec();
    let mut f = |p: &[f64]| ref_loss(&base, &unflatten(&like, p), &batch);
    let numeric = finite_diff_at(&mut f, &flat, eps, coords.iter().copied()).unwrap();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut max_scaled, mut max_pointwise, mut diff2, mut norm2) = (0.0f64, 0.0f64, 0.0, 0.0);
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let d = (a - n).abs();
        max_scaled = max_scaled.max(d / a.abs().max(n.abs()).max(scale));
        max_pointwise = max_pointwise.max(d / a.abs().max(n.abs()).max(f64::MIN_POSITIVE));
        diff2 += d * d;
        norm2 += n * n;
    }
    GradCheck {
        probes,
        max_scaled,
        vector_rel: (diff2 / norm2).sqrt(),
        max_pointwise,
    }
}
