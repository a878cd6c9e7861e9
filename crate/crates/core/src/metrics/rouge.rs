use std::collections::HashMap;
use std::hash::Hash;

/// A score plus a flag for degenerate inputs (empty sequences, or shorter
/// than the n-gram order), which score 0 rather than erroring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn degenerate() -> Self {
        Scored {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn f_measure(overlap: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> Scored {
    if hyp.is_empty() || reference.is_empty() {
        return Scored::degenerate();
    }
    Scored {
        value: f_measure(lcs_len(hyp, reference), hyp.len(), reference.len()),
        degenerate: false,
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in seq.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches between the n-gram multisets of `hyp` and `reference`.
pub(crate) fn clipped_overlap<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> usize {
    if hyp.len() < n || reference.len() < n {
        return 0;
    }
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// N-gram overlap F-measure with clipped counts.
///
/// # Panics
/// If `n == 0`.
pub fn rouge_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> Scored {
    assert!(n >= 1, "rouge_n needs n >= 1");
    if hyp.len() < n || reference.len() < n {
        return Scored::degenerate();
    }
    let overlap = clipped_overlap(hyp, reference, n);
    Scored {
        value: f_measure(overlap, hyp.len() + 1 - n, reference.len() + 1 - n),
        degenerate: false,
    }
}
