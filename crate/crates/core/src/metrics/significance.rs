use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-example scores of one system on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub metric: String,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Paired approximate randomization test on the absolute mean difference.
///
/// Each of `rounds` shuffles swaps every pair with probability ½; the
/// p-value is `(#{shuffled ≥ observed} + 1) / (rounds + 1)`, so it lies in
/// (0, 1]. Swapping a pair flips the sign of its difference, so the test is
/// symmetric in `a` and `b` for a fixed seed.
pub fn approx_randomization(a: &[f64], b: &[f64], rounds: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diffs.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0usize;
    for _ in 0..rounds {
        let s: f64 = diffs
            .iter()
            .map(|&d| if rng.gen_bool(0.5) { -d } else { d })
            .sum();
        if s.abs() >= observed {
            at_least += 1;
        }
    }
    Ok((at_least + 1) as f64 / (rounds + 1) as f64)
}
