//! ROUGE, BLEU and the paired approximate randomization test.
//!
//! Scorers are generic over the token type so they work on ids and on
//! strings alike.

mod bleu;
mod rouge;
mod significance;

pub use bleu::{bleu, corpus_bleu, BleuStats};
pub use rouge::{lcs_len, rouge_l, rouge_n, Scored};
pub use significance::{approx_randomization, ScoreSet};

/// Metric names accepted by the evaluation and grid commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    RougeL,
    Rouge1,
    Rouge2,
    Bleu,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::RougeL, Metric::Rouge1, Metric::Rouge2, Metric::Bleu];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RougeL => "rouge_l",
            Metric::Rouge1 => "rouge_1",
            Metric::Rouge2 => "rouge_2",
            Metric::Bleu => "bleu",
        }
    }

    /// Per-example score. BLEU per example is sentence BLEU; the corpus
    /// figure should come from [`corpus_score`] instead.
    pub fn score<T: Eq + std::hash::Hash>(self, hyp: &[T], reference: &[T]) -> f64 {
        match self {
            Metric::RougeL => rouge_l(hyp, reference).value,
            Metric::Rouge1 => rouge_n(hyp, reference, 1).value,
            Metric::Rouge2 => rouge_n(hyp, reference, 2).value,
            Metric::Bleu => bleu(hyp, reference, 4),
        }
    }

    /// Corpus figure: mean per-example F for ROUGE, pooled-count BLEU.
    pub fn corpus_score<T: Eq + std::hash::Hash>(self, pairs: &[(&[T], &[T])]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        match self {
            Metric::Bleu => corpus_bleu(pairs, 4),
            _ => pairs.iter().map(|(h, r)| self.score(h, r)).sum::<f64>() / pairs.len() as f64,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| crate::Error::config(format!("unknown metric `{s}` (rouge_l, rouge_1, rouge_2, bleu)")))
    }
}
