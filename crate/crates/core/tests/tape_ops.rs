//! Every differentiable tape op against central differences of an
//! independent f64 implementation, on random small inputs.

use almp::numerics::{finite_diff_gradient, Matrix, Segment, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Shape = (usize, usize);

/// f64 inputs (row-major, shapes as given) to f64 outputs (row-major).
type Reference<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Compares d/dinputs of Σ w ⊙ op(inputs) from the tape with central
/// differences of the reference; returns the worst error relative to the
/// gradient scale.
fn check(seed: u64, shapes: &[Shape], build: &Build<'_>, reference: &Reference<'_>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f32>> = shapes.iter().map(|&(r, c)| random(&mut rng, r * c)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&values)
        .map(|(&(r, c), v)| tape.param(Matrix::from_vec(r, c, v.clone()).unwrap()))
        .collect();
    let out = build(&mut tape, &vars);
    let (or, oc) = tape.value(out).shape();
    let w = random(&mut rng, or * oc);
    let wv = tape.constant(Matrix::from_vec(or, oc, w.clone()).unwrap());
    let weighted = tape.mul(out, wv).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(v).unwrap().as_slice().iter().map(|&g| f64::from(g)).collect::<Vec<_>>())
        .collect();

    let flat: Vec<f64> = values.iter().flatten().map(|&v| f64::from(v)).collect();
    let split = |p: &[f64]| -> Vec<Vec<f64>> {
        let mut rest = p;
        shapes
            .iter()
            .map(|&(r, c)| {
                let (h, t) = rest.split_at(r * c);
                rest = t;
                h.to_vec()
            })
            .collect()
    };
    let numeric = finite_diff_gradient(
        |p| reference(&split(p)).iter().zip(&w).map(|(o, &wk)| o * f64::from(wk)).sum(),
        &flat,
        1e-6,
    )
    .unwrap();
    let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(scale))
        .fold(0.0, f64::max)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, b_t: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k)
                .map(|l| a[i * k + l] * if b_t { b[j * k + l] } else { b[l * n + j] })
                .sum();
        }
    }
    out
}

fn ln_ref(x: &[f64], g: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(move |(c, v)| (v - mean) * s * g[c] + b[c]).collect::<Vec<_>>()
        })
        .collect()
}

fn attention_ref(q: &[f64], k: &[f64], v: &[f64], d: usize, segs: &[Segment], heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; q.len()];
    for s in segs {
        for h in 0..heads {
            for i in 0..s.len {
                let qi = (s.start + i) * d + h * dh;
                let sc: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = (s.start + j) * d + h * dh;
                        (0..dh).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|x| (x - m).exp()).sum();
                for (j, x) in sc.iter().enumerate() {
                    let p = (x - m).exp() / z;
                    let vj = (s.start + j) * d + h * dh;
                    for c in 0..dh {
                        out[qi + c] += p * v[vj + c];
                    }
                }
            }
        }
    }
    out
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let e = check(seed, &[(m, k), (k, n)], &|t, v| t.matmul(v[0], v[1]).unwrap(),
            &|x| mm(&x[0], &x[1], m, k, n, false));
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn matmul_t(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let e = check(seed, &[(m, k), (n, k)], &|t, v| t.matmul_t(v[0], v[1]).unwrap(),
            &|x| mm(&x[0], &x[1], m, k, n, true));
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn add_mul_scale(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let e = check(seed, &[(r, c), (r, c)], &|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let p = t.mul(s, v[1]).unwrap();
            t.scale(p, 1.7)
        }, &|x| x[0].iter().zip(&x[1]).map(|(a, b)| 1.7 * (a + b) * b).collect());
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn add_row(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let e = check(seed, &[(r, c), (1, c)], &|t, v| t.add_row(v[0], v[1]).unwrap(),
            &|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % c]).collect());
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn gelu(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let e = check(seed, &[(r, c)], &|t, v| t.gelu(v[0]), &|x| {
            x[0].iter().map(|&v| {
                0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
            }).collect()
        });
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), r in 1usize..5, c in 2usize..7) {
        let e = check(seed, &[(r, c), (1, c), (1, c)], &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            &|x| ln_ref(&x[0], &x[1], &x[2], c));
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn gather(seed in any::<u64>(), rows in 1usize..6, c in 1usize..4, picks in prop::collection::vec(0usize..100, 1..8)) {
        let ids: Vec<usize> = picks.iter().map(|p| p % rows).collect();
        let ids2 = ids.clone();
        let e = check(seed, &[(rows, c)], &move |t, v| t.gather(v[0], &ids).unwrap(),
            &move |x| ids2.iter().flat_map(|&i| x[0][i * c..(i + 1) * c].to_vec()).collect());
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn causal_attention(seed in any::<u64>(), lens in prop::collection::vec(1usize..4, 1..3), heads in 1usize..3, dh in 1usize..3) {
        let d = heads * dh;
        let mut segs = Vec::new();
        let mut start = 0;
        for &len in &lens {
            segs.push(Segment { start, len });
            start += len;
        }
        let n = start;
        let s2 = segs.clone();
        let e = check(seed, &[(n, d), (n, d), (n, d)],
            &move |t, v| t.causal_attention(v[0], v[1], v[2], &segs, heads).unwrap(),
            &move |x| attention_ref(&x[0], &x[1], &x[2], d, &s2, heads));
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), r in 1usize..5, c in 2usize..6, mask in any::<u8>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut targets: Vec<Option<usize>> = (0..r)
            .map(|i| (mask >> (i % 8) & 1 == 1).then(|| rng.gen_range(0..c)))
            .collect();
        if targets.iter().all(Option::is_none) {
            targets[0] = Some(0);
        }
        let t2 = targets.clone();
        let e = check(seed, &[(r, c)], &move |t, v| t.cross_entropy(v[0], &targets).unwrap(), &move |x| {
            let mut total = 0.0;
            let mut n = 0.0;
            for (row, t) in x[0].chunks(c).zip(&t2) {
                let Some(t) = *t else { continue };
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                total += m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t];
                n += 1.0;
            }
            vec![total / n]
        });
        prop_assert!(e < TOL, "error {e}");
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(a, b, random(&mut rng, a * b)).unwrap();
        let y = Matrix::from_vec(b, c, random(&mut rng, b * c)).unwrap();
        let z = Matrix::from_vec(c, d, random(&mut rng, c * d)).unwrap();
        let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        let scale = left.as_slice().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right).unwrap() / scale <= 1e-5);
    }
}

#[test]
fn unused_parameters_get_exact_zero_gradients() {
    let mut tape = Tape::new();
    let used = tape.param(Matrix::filled(2, 2, 0.5));
    let unused = tape.param(Matrix::filled(3, 1, 2.0));
    let s = tape.sum(used);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).map_or(true, |m| m.as_slice().iter().all(|&v| v == 0.0)));
    assert!(g.get(used).unwrap().as_slice().iter().all(|&v| v == 1.0));
}
