//! Deterministic synthetic sequence-to-sequence tasks.
//!
//! The default family has two related tasks, `reverse` and `select`
//! (keep the symbols that directly follow a marker), and a target task
//! `compose` = reverse ∘ select that shares both sub-skills.

mod io;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{corpus_exists, load_corpus, load_split, save_corpus, save_split, split_path};
pub use vocab::{Vocab, MARKER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Copy,
    Reverse,
    Sort,
    SelectMarked,
    /// reverse ∘ select-marked
    Compose,
    /// A seeded bijection applied symbol by symbol.
    ParaphraseMap,
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Copy => "copy",
            Transform::Reverse => "reverse",
            Transform::Sort => "sort",
            Transform::SelectMarked => "select-marked",
            Transform::Compose => "compose",
            Transform::ParaphraseMap => "paraphrase-map",
        }
    }

    fn uses_marker(self) -> bool {
        matches!(self, Transform::SelectMarked | Transform::Compose)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => Transform::Copy,
            "reverse" => Transform::Reverse,
            "sort" => Transform::Sort,
            "select-marked" | "select" => Transform::SelectMarked,
            "compose" => Transform::Compose,
            "paraphrase-map" | "paraphrase" => Transform::ParaphraseMap,
            other => return Err(Error::config(format!("unknown transformation `{other}`"))),
        })
    }
}

/// One input/target pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub transform: Transform,
    pub vocab: Vocab,
    /// Inclusive range of plain symbols per input (markers not counted).
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of replacing each target symbol with a random one.
    pub noise: f64,
    /// Interleave markers into inputs. Always on for the marker-driven
    /// transformations; optional for the others (e.g. a copy task that
    /// should also see the marker symbol).
    pub marked_inputs: bool,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(name: &str, transform: Transform, vocab: Vocab, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            transform,
            vocab,
            min_len: 3,
            max_len: 6,
            noise: 0.0,
            marked_inputs: transform.uses_marker(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', '.', ' ']) {
            return Err(Error::config(format!("task name `{}` is not a plain identifier", self.name)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range {}..={} is empty or starts at zero",
                self.min_len, self.max_len
            )));
        }
        let plain = self.vocab.plain_len();
        let needed = match self.transform {
            Transform::ParaphraseMap | Transform::Sort => 2,
            _ => 1,
        };
        if plain < needed {
            return Err(Error::config(format!(
                "{} needs at least {needed} plain symbols, vocabulary has {plain}",
                self.transform
            )));
        }
        if (self.marked_inputs || self.transform.uses_marker()) && self.vocab.marker_id().is_none() {
            return Err(Error::config(format!("{} needs the marker symbol `{MARKER}`", self.transform)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// Seeded permutation of the plain symbols used by `paraphrase-map`.
    pub fn paraphrase_table(&self) -> Vec<(u32, u32)> {
        let from = self.vocab.plain_ids();
        let mut to = from.clone();
        to.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_ba5e));
        from.into_iter().zip(to).collect()
    }

    /// The `index`-th candidate example. A pure function of the spec and
    /// `index`; [`generate`] filters duplicates on top of this.
    pub fn example_at(&self, index: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let plain = self.vocab.plain_ids();
        let len = rng.gen_range(self.min_len..=self.max_len);
        let symbols: Vec<u32> = (0..len).map(|_| plain[rng.gen_range(0..plain.len())]).collect();
        let input = if self.marked_inputs || self.transform.uses_marker() {
            let marker = self.vocab.marker_id().expect("validated");
            let mut marked: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
            if !marked.iter().any(|&m| m) {
                let i = rng.gen_range(0..len);
                marked[i] = true;
            }
            let mut input = Vec::with_capacity(2 * len);
            for (s, m) in symbols.iter().zip(marked) {
                if m {
                    input.push(marker);
                }
                input.push(*s);
            }
            input
        } else {
            symbols
        };
        let mut target = self.apply(&input);
        if self.noise > 0.0 {
            for t in &mut target {
                if rng.gen_bool(self.noise) {
                    *t = plain[rng.gen_range(0..plain.len())];
                }
            }
        }
        Example { input, target }
    }

    /// The noise-free transformation of `input`.
    pub fn apply(&self, input: &[u32]) -> Vec<u32> {
        let marker = self.vocab.marker_id();
        match self.transform {
            Transform::Copy => input.to_vec(),
            Transform::Reverse => input.iter().rev().copied().collect(),
            Transform::Sort => {
                let mut v = input.to_vec();
                v.sort_unstable();
                v
            }
            Transform::SelectMarked => select_marked(input, marker),
            Transform::Compose => {
                let mut v = select_marked(input, marker);
                v.reverse();
                v
            }
            Transform::ParaphraseMap => {
                let table = self.paraphrase_table();
                input
                    .iter()
                    .map(|t| table.iter().find(|(f, _)| f == t).map_or(*t, |(_, to)| *to))
                    .collect()
            }
        }
    }
}

fn select_marked(input: &[u32], marker: Option<u32>) -> Vec<u32> {
    input
        .windows(2)
        .filter(|w| Some(w[0]) == marker && Some(w[1]) != marker)
        .map(|w| w[1])
        .collect()
}

/// Builds disjoint train/val/test splits: candidates are drawn in index
/// order and any whose input was already used is skipped.
pub fn generate(spec: &TaskSpec, sizes: SplitSizes) -> Result<Corpus> {
    spec.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::config("every split needs at least one example"));
    }
    let total = sizes.train + sizes.val + sizes.test;
    let budget = 50 * total as u64 + 1000;
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let mut index = 0u64;
    while examples.len() < total {
        if index >= budget {
            return Err(Error::config(format!(
                "task `{}`: only {} distinct inputs after {budget} draws, {total} requested; \
                 widen the vocabulary or length range",
                spec.name,
                examples.len()
            )));
        }
        let ex = spec.example_at(index);
        index += 1;
        if seen.insert(ex.input.clone()) {
            examples.push(ex);
        }
    }
    let test = examples.split_off(sizes.train + sizes.val);
    let val = examples.split_off(sizes.train);
    Ok(Corpus {
        train: examples,
        val,
        test,
    })
}

/// Seeded uniform sample without replacement of `n_train` training and
/// `n_val` validation examples; the test split is kept whole.
pub fn subsample_sizes(corpus: &Corpus, n_train: usize, n_val: usize, seed: u64) -> Result<Corpus> {
    for (n, split, name) in [(n_train, &corpus.train, "train"), (n_val, &corpus.val, "val")] {
        if n > split.len() {
            return Err(Error::Contract(format!(
                "cannot subsample {n} examples from a {name} split of {}",
                split.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = corpus.train.choose_multiple(&mut rng, n_train).cloned().collect();
    let val = corpus.val.choose_multiple(&mut rng, n_val).cloned().collect();
    Ok(Corpus {
        train,
        val,
        test: corpus.test.clone(),
    })
}

/// [`subsample_sizes`] with the same size for train and validation.
pub fn subsample(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    subsample_sizes(corpus, n, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: Transform) -> TaskSpec {
        TaskSpec::new("t", t, Vocab::letters(20).unwrap(), 11)
    }

    fn sizes() -> SplitSizes {
        SplitSizes {
            train: 200,
            val: 50,
            test: 50,
        }
    }

    #[test]
    fn copy_and_reverse_targets() {
        let c = generate(&spec(Transform::Copy), sizes()).unwrap();
        assert!(c.train.iter().all(|e| e.input == e.target));
        let v = Vocab::letters(20).unwrap();
        let r = spec(Transform::Reverse);
        let abc = v.encode("a b c").unwrap();
        assert_eq!(v.decode(&r.apply(&abc)), "c b a");
    }

    #[test]
    fn compose_hand_case() {
        let v = Vocab::letters(20).unwrap();
        let s = spec(Transform::Compose);
        let input = v.encode("a X b X c").unwrap();
        assert_eq!(v.decode(&s.apply(&input)), "c b");
        let sel = spec(Transform::SelectMarked);
        assert_eq!(v.decode(&sel.apply(&input)), "b c");
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let s = spec(Transform::Compose);
        let a = generate(&s, sizes()).unwrap();
        assert_eq!(a, generate(&s, sizes()).unwrap());
        let train: HashSet<_> = a.train.iter().map(|e| &e.input).collect();
        assert!(a.val.iter().chain(&a.test).all(|e| !train.contains(&e.input)));
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (200, 50, 50));
        assert!(a.train.iter().all(|e| !e.target.is_empty()));
    }

    #[test]
    fn tiny_vocab_is_configuration_error() {
        let mut s = TaskSpec::new("t", Transform::Copy, Vocab::letters(1).unwrap(), 0);
        s.max_len = 3;
        s.min_len = 3;
        assert!(matches!(generate(&s, sizes()), Err(Error::Config(_))));
        let p = TaskSpec::new("p", Transform::ParaphraseMap, Vocab::letters(1).unwrap(), 0);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn marked_copy_keeps_markers() {
        let mut s = spec(Transform::Copy);
        s.marked_inputs = true;
        let marker = s.vocab.marker_id().unwrap();
        let c = generate(&s, sizes()).unwrap();
        assert!(c.train.iter().all(|e| e.input == e.target && e.input.contains(&marker)));
    }

    #[test]
    fn paraphrase_is_a_bijection() {
        let s = spec(Transform::ParaphraseMap);
        let table = s.paraphrase_table();
        let targets: HashSet<_> = table.iter().map(|(_, t)| *t).collect();
        assert_eq!(targets.len(), table.len());
    }

    #[test]
    fn subsample_contracts() {
        let c = generate(&spec(Transform::Reverse), sizes()).unwrap();
        let s = subsample(&c, 5, 3).unwrap();
        assert_eq!(s.train.len(), 5);
        assert_eq!(s.train.iter().collect::<HashSet<_>>().len(), 5);
        assert_eq!(s, subsample(&c, 5, 3).unwrap());
        assert_eq!(s.test, c.test);
        assert!(matches!(subsample(&c, 51, 0), Err(Error::Contract(_))));

        let full = subsample_sizes(&c, 200, 50, 9).unwrap();
        let mut a = full.train.clone();
        let mut b = c.train.clone();
        a.sort_by(|x, y| x.input.cmp(&y.input));
        b.sort_by(|x, y| x.input.cmp(&y.input));
        assert_eq!(a, b);
    }
}
