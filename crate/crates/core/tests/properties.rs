//! Invariants of the optimizer, model, importance, pruning, trainer, task
//! and metric modules, checked on generated inputs.

mod support;

use std::collections::HashSet;

use almp::importance::{importance_input, input_importance, AdapterNorms, ImportanceScores, MatrixPair, NormAccumulator, SmootherState};
use almp::metrics::{approx_randomization, bleu, rouge_l};
use almp::model::{forward, InitSnapshot};
use almp::numerics::{AdamW, AdamWConfig, Matrix};
use almp::pruning::{prune, prune_count, PruneConfig, ResetMode};
use almp::tasks::{generate, SplitSizes, TaskSpec, Transform, Vocab};
use almp::trainer::{adapter_gradients, merge_train, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{random_batch, random_setup};

fn random_scores(set: &almp::model::AdapterSet, seed: u64) -> ImportanceScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
    ImportanceScores {
        per_adapter: set
            .modules()
            .map(|a| MatrixPair {
                a: m(a.a.rows(), a.a.cols()),
                b: m(a.b.rows(), a.b.cols()),
            })
            .collect(),
    }
}

fn values(set: &almp::model::AdapterSet) -> Vec<Vec<f32>> {
    set.modules().map(|m| [m.a.as_slice(), m.b.as_slice()].concat()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adamw_with_zero_lr_is_identity(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let start = p.clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..AdamWConfig::default() }).unwrap();
        for _ in 0..steps {
            let g = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-5.0f32..5.0)).collect()).unwrap();
            opt.step(&mut [("p", &mut p)], &[&g]).unwrap();
        }
        prop_assert_eq!(p, start);
    }

    #[test]
    fn input_importance_scales_with_weights(seed in any::<u64>(), c in -4.0f32..4.0) {
        let (_, set) = random_setup(seed % 8);
        let m = set.modules().next().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norms = AdapterNorms {
            input: (0..m.a.cols()).map(|_| rng.gen_range(0.0f32..3.0)).collect(),
            inner: (0..m.rank()).map(|_| rng.gen_range(0.0f32..3.0)).collect(),
        };
        let base = importance_input(m, &norms).unwrap();
        let mut scaled = m.clone();
        scaled.a = m.a.scale(c);
        scaled.b = m.b.scale(c);
        let s = importance_input(&scaled, &norms).unwrap();
        for (x, y) in [(&base.a, &s.a), (&base.b, &s.b)] {
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                prop_assert!((u * c.abs() - v).abs() <= 1e-5 * (1.0 + v.abs()));
            }
        }
        // Larger feature norms never lower an entry's importance.
        let louder = AdapterNorms {
            input: norms.input.iter().map(|v| v * 1.5 + 0.1).collect(),
            inner: norms.inner.iter().map(|v| v * 1.5 + 0.1).collect(),
        };
        let l = importance_input(m, &louder).unwrap();
        for (x, y) in [(&base.a, &l.a), (&base.b, &l.b)] {
            prop_assert!(x.as_slice().iter().zip(y.as_slice()).all(|(u, v)| v >= u));
        }
    }

    #[test]
    fn smoother_is_deterministic_and_nonnegative(seed in any::<u64>(), steps in 1usize..6) {
        let (_, set) = random_setup(0);
        let run = || {
            let mut s = SmootherState::new(0.85, 0.85).unwrap();
            let mut out = Vec::new();
            for k in 0..steps {
                out.push(s.smooth(&random_scores(&set, seed.wrapping_add(k as u64))).unwrap());
            }
            out
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().flat_map(|s| &s.per_adapter).all(|p| p.a.as_slice().iter().chain(p.b.as_slice()).all(|&v| v >= 0.0)));
    }

    #[test]
    fn parameter_pruning_counts_and_determinism(seed in any::<u64>(), ratio in 0.0f64..100.0, init in any::<bool>()) {
        let (_, set) = random_setup(seed % 4);
        let scores = random_scores(&set, seed);
        let snap = InitSnapshot::capture(&set);
        let reset = if init { ResetMode::Init } else { ResetMode::Zero };
        let config = PruneConfig::parameter(ratio, reset);
        let (mut x, mut y) = (set.clone(), set.clone());
        let rx = prune(&mut x, &scores, &config, &snap).unwrap();
        let ry = prune(&mut y, &scores, &config, &snap).unwrap();
        prop_assert_eq!(values(&x), values(&y));
        prop_assert_eq!(rx.entries_reset, ry.entries_reset);
        for (m, r) in set.modules().zip(&rx.per_adapter) {
            let want = prune_count(ratio, m.a.len()) + prune_count(ratio, m.b.len());
            prop_assert_eq!(r.entries_reset, want);
            prop_assert!(want <= m.a.len() + m.b.len());
        }
    }

    #[test]
    fn pruning_is_local_to_each_adapter(seed in any::<u64>(), ratio in 1.0f64..99.0, which in 0usize..4) {
        let (_, set) = random_setup(seed % 4);
        let scores = random_scores(&set, seed);
        let mut changed = scores.clone();
        let k = which % set.len();
        changed.per_adapter[k] = random_scores(&set, seed ^ 0xabc).per_adapter[k].clone();
        let snap = InitSnapshot::capture(&set);
        let config = PruneConfig::parameter(ratio, ResetMode::Zero);
        let (mut x, mut y) = (set.clone(), set.clone());
        prune(&mut x, &scores, &config, &snap).unwrap();
        prune(&mut y, &changed, &config, &snap).unwrap();
        for (i, (u, v)) in values(&x).iter().zip(values(&y)).enumerate() {
            if i != k {
                prop_assert_eq!(u, &v);
            }
        }
    }

    #[test]
    fn zero_reset_is_idempotent(seed in any::<u64>(), ratio in 0.0f64..100.0, module in any::<bool>()) {
        let (_, set) = random_setup(seed % 4);
        let scores = random_scores(&set, seed);
        let snap = InitSnapshot::capture(&set);
        let config = if module {
            PruneConfig::module(ratio / 100.0, ResetMode::Zero)
        } else {
            PruneConfig::parameter(ratio, ResetMode::Zero)
        };
        let mut once = set.clone();
        prune(&mut once, &scores, &config, &snap).unwrap();
        let mut twice = once.clone();
        prune(&mut twice, &scores, &config, &snap).unwrap();
        prop_assert_eq!(values(&once), values(&twice));
    }

    #[test]
    fn init_reset_restores_snapshot_bits(seed in any::<u64>(), ratio in 0.0f64..100.0) {
        let (_, start) = random_setup(seed % 4);
        let snap = InitSnapshot::capture(&start);
        let mut set = start.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in set.modules_mut() {
            for v in m.a.as_mut_slice().iter_mut().chain(m.b.as_mut_slice()) {
                *v += rng.gen_range(-1.0f32..1.0);
            }
        }
        let trained = values(&set);
        prune(&mut set, &random_scores(&start, seed), &PruneConfig::parameter(ratio, ResetMode::Init), &snap).unwrap();
        for ((after, before), init) in values(&set).iter().zip(&trained).zip(values(&start)) {
            for ((a, b), i) in after.iter().zip(before).zip(init) {
                prop_assert!(a.to_bits() == b.to_bits() || a.to_bits() == i.to_bits());
            }
        }
    }

    #[test]
    fn example_at_is_pure(seed in any::<u64>(), index in any::<u64>(), t in 0usize..6) {
        let transform = TRANSFORMS[t];
        let spec = TaskSpec::new("t", transform, Vocab::letters(8).unwrap(), seed);
        prop_assert_eq!(spec.example_at(index), spec.example_at(index));
        let other = TaskSpec::new("t", transform, Vocab::letters(8).unwrap(), seed);
        prop_assert_eq!(spec.example_at(index), other.example_at(index));
    }

    #[test]
    fn transforms_match_oracle(seed in any::<u64>(), index in 0u64..1000, t in 0usize..6) {
        let vocab = Vocab::letters(8).unwrap();
        let marker = vocab.marker_id().unwrap();
        let spec = TaskSpec::new("t", TRANSFORMS[t], vocab, seed);
        let ex = spec.example_at(index);
        let plain: Vec<u32> = ex.input.iter().copied().filter(|&s| s != marker).collect();
        let marked: Vec<u32> = ex.input.iter().enumerate()
            .filter(|&(i, &s)| s != marker && i > 0 && ex.input[i - 1] == marker)
            .map(|(_, &s)| s)
            .collect();
        let want: Vec<u32> = match TRANSFORMS[t] {
            Transform::Copy => ex.input.clone(),
            Transform::Reverse => ex.input.iter().rev().copied().collect(),
            Transform::Sort => { let mut v = ex.input.clone(); v.sort(); v }
            Transform::SelectMarked => marked.clone(),
            Transform::Compose => marked.iter().rev().copied().collect(),
            Transform::ParaphraseMap => {
                let table = spec.paraphrase_table();
                let image: HashSet<u32> = table.iter().map(|p| p.1).collect();
                prop_assert_eq!(image.len(), table.len());
                plain.iter().map(|s| table.iter().find(|p| p.0 == *s).unwrap().1).collect()
            }
        };
        prop_assert_eq!(ex.target, want);
    }

    #[test]
    fn splits_are_disjoint_with_requested_sizes(seed in any::<u64>(), train in 1usize..40, val in 1usize..20, test in 1usize..20) {
        let spec = TaskSpec::new("t", Transform::Reverse, Vocab::letters(8).unwrap(), seed);
        let c = generate(&spec, SplitSizes { train, val, test }).unwrap();
        prop_assert_eq!((c.train.len(), c.val.len(), c.test.len()), (train, val, test));
        let inputs: HashSet<&Vec<u32>> = c.train.iter().chain(&c.val).chain(&c.test).map(|e| &e.input).collect();
        prop_assert_eq!(inputs.len(), train + val + test);
    }

    #[test]
    fn randomization_test_is_symmetric(seed in any::<u64>(), pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = approx_randomization(&a, &b, 200, seed).unwrap();
        let q = approx_randomization(&b, &a, 200, seed).unwrap();
        prop_assert_eq!(p, q);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn metrics_are_relabel_invariant(hyp in prop::collection::vec(0u32..6, 0..12), reference in prop::collection::vec(0u32..6, 0..12), shift in 1u32..100) {
        let relabel = |v: &[u32]| v.iter().map(|s| (s * 7 + shift) % 1000).collect::<Vec<_>>();
        let (h, r) = (relabel(&hyp), relabel(&reference));
        prop_assert_eq!(rouge_l(&hyp, &reference), rouge_l(&h, &r));
        prop_assert_eq!(bleu(&hyp, &reference, 4), bleu(&h, &r, 4));
    }

    #[test]
    fn rouge_l_of_self_is_one(x in prop::collection::vec(0u32..6, 1..20)) {
        prop_assert_eq!(rouge_l(&x, &x).value, 1.0);
    }
}

const TRANSFORMS: [Transform; 6] = [
    Transform::Copy,
    Transform::Reverse,
    Transform::Sort,
    Transform::SelectMarked,
    Transform::Compose,
    Transform::ParaphraseMap,
];

#[test]
fn reversal_lowers_rouge_l() {
    let x: Vec<u32> = (0..8).collect();
    let rev: Vec<u32> = x.iter().rev().copied().collect();
    assert!(rouge_l(&rev, &x).value < rouge_l(&x, &x).value);
    assert!(bleu(&rev, &x, 4) < bleu(&x, &x, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn later_tokens_never_change_earlier_logits(seed in any::<u64>(), len in 2usize..10, cut in 1usize..9) {
        let (base, set) = random_setup(seed % 4);
        let cut = cut.min(len - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = base.config.vocab_size as u32;
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        let mut altered = tokens.clone();
        for t in &mut altered[cut..] {
            *t = (*t + 1 + rng.gen_range(0..v - 1)) % v;
        }
        let (x, y) = (forward(&base, &set, &tokens).unwrap(), forward(&base, &set, &altered).unwrap());
        for r in 0..cut {
            prop_assert_eq!(x.row(r), y.row(r));
        }
    }

    #[test]
    fn gradients_reach_every_adapter_and_leave_base_alone(seed in any::<u64>()) {
        let (base, set) = random_setup(seed % 4);
        let before = base.fingerprint();
        let (loss, grads) = adapter_gradients(&base, &set, &random_batch(&base, 3, seed)).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert_eq!(grads.len(), set.len());
        for (g, m) in grads.iter().zip(set.modules()) {
            prop_assert_eq!(g.a.shape(), m.a.shape());
            prop_assert_eq!(g.b.shape(), m.b.shape());
            prop_assert!(g.a.is_finite() && g.b.is_finite());
            prop_assert!(g.a.as_slice().iter().any(|&v| v != 0.0) && g.b.as_slice().iter().any(|&v| v != 0.0));
        }
        prop_assert_eq!(base.fingerprint(), before);
    }

    #[test]
    fn norm_accumulator_shards_merge_to_whole(seed in any::<u64>(), split in 1usize..7) {
        let (base, set) = random_setup(seed % 4);
        let spec = TaskSpec::new("t", Transform::Copy, Vocab::letters(8).unwrap(), seed);
        let examples: Vec<_> = (0..8).map(|i| spec.example_at(i)).collect();
        let mut whole = NormAccumulator::new(&set);
        whole.accumulate(&base, &set, &examples).unwrap();
        let (mut left, mut right) = (NormAccumulator::new(&set), NormAccumulator::new(&set));
        left.accumulate(&base, &set, &examples[..split]).unwrap();
        right.accumulate(&base, &set, &examples[split..]).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left.positions(), whole.positions());
        let (a, b) = (left.finish().unwrap(), whole.finish().unwrap());
        for (x, y) in a.per_adapter.iter().zip(&b.per_adapter) {
            for (u, v) in x.input.iter().chain(&x.inner).zip(y.input.iter().chain(&y.inner)) {
                prop_assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()));
            }
        }
        // Scores from merged norms equal scores from the whole pass.
        let sa = input_importance(&set, &a).unwrap();
        let sb = input_importance(&set, &b).unwrap();
        for (x, y) in sa.per_adapter.iter().zip(&sb.per_adapter) {
            prop_assert!(x.a.max_abs_diff(&y.a).unwrap() <= 1e-4 && x.b.max_abs_diff(&y.b).unwrap() <= 1e-4);
        }
    }
}

fn tiny_training(prune_ratio: f64) -> (almp::model::BaseModel, almp::model::AdapterSet, Vec<almp::tasks::Example>, TrainConfig) {
    let (base, set) = random_setup(3);
    let spec = TaskSpec::new("t", Transform::Reverse, Vocab::letters(8).unwrap(), 5);
    let examples: Vec<_> = (0..12).map(|i| spec.example_at(i)).collect();
    let config = TrainConfig {
        optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        batch_size: 4,
        max_epochs: 2,
        prune: PruneConfig::parameter(prune_ratio, ResetMode::Zero),
        seed: 9,
        ..TrainConfig::default()
    };
    (base, set, examples, config)
}

#[test]
fn training_is_seed_deterministic_with_ordered_log() {
    let (base, set, ex, config) = tiny_training(30.0);
    let a = merge_train(&base, &set, &ex[..8], &ex[8..], &config, 0.02).unwrap();
    let b = merge_train(&base, &set, &ex[..8], &ex[8..], &config, 0.02).unwrap();
    assert_eq!(values(&a.adapters), values(&b.adapters));
    assert_eq!(a.log, b.log);
    assert!(a.log.windows(2).all(|w| w[0].step < w[1].step && w[0].epoch <= w[1].epoch));
    assert!(a.log.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn pruned_entries_remain_trainable() {
    let (base, mut set) = random_setup(3);
    let scores = random_scores(&set, 1);
    let snap = InitSnapshot::capture(&set);
    prune(&mut set, &scores, &PruneConfig::parameter(50.0, ResetMode::Zero), &snap).unwrap();
    let (_, grads) = adapter_gradients(&base, &set, &random_batch(&base, 4, 2)).unwrap();
    // A zeroed entry of A still receives gradient through the (partly
    // non-zero) B, so pruning does not freeze it.
    for (m, g) in set.modules().zip(&grads) {
        let revived = m.a.as_slice().iter().zip(g.a.as_slice()).filter(|(w, gr)| **w == 0.0 && **gr != 0.0).count();
        assert!(revived > 0, "no zeroed A entry of {} has gradient", m.site);
    }
}
