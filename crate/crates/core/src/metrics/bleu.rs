use std::hash::Hash;

use super::rouge::clipped_overlap;

/// Pooled n-gram statistics; summing these over a corpus gives corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> Self {
        BleuStats {
            matches: (1..=max_n).map(|n| clipped_overlap(hyp, reference, n)).collect(),
            totals: (1..=max_n).map(|n| (hyp.len() + 1).saturating_sub(n)).collect(),
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the clipped precisions times the brevity penalty,
    /// on a 0–100 scale. Orders n ≥ 2 with no match use 1/(total + 1).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (i, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let p = if m > 0 {
                m as f64 / t as f64
            } else if i == 0 {
                return 0.0;
            } else {
                1.0 / (t as f64 + 1.0)
            };
            log_sum += p.ln();
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * bp * (log_sum / self.matches.len() as f64).exp()
    }
}

/// Sentence BLEU with orders 1..=`max_n`.
pub fn bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> f64 {
    BleuStats::new(hyp, reference, max_n).score()
}

/// Corpus BLEU: n-gram counts and lengths are pooled before scoring.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])], max_n: usize) -> f64 {
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        total.add(&BleuStats::new(h, r, max_n));
    }
    total.score()
}
