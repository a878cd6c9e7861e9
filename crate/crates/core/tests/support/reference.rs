//! Straight-line f64 re-implementation of the forward pass and the metrics,
//! written independently of the library so it can serve as an oracle.

#![allow(dead_code)]

use almp::model::{AdapterSet, BaseModel, Batch, Projection};
use almp::numerics::Matrix;

type Mat = Vec<Vec<f64>>;

fn mat(m: &Matrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| f64::from(v)).collect()).collect()
}

/// `x · wᵀ`
fn mul_t(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| w.iter().map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * s * gain[c] + bias[c]).collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// One adapter in f64: `delta = scale · B · A`.
#[derive(Clone, Debug)]
pub struct RefAdapter {
    pub layer: usize,
    pub projection: Projection,
    pub a: Mat,
    pub b: Mat,
    pub scale: f64,
}

impl RefAdapter {
    pub fn len(&self) -> usize {
        self.a.len() * self.a[0].len() + self.b.len() * self.b[0].len()
    }
}

pub fn ref_adapters(set: &AdapterSet) -> Vec<RefAdapter> {
    set.modules()
        .map(|m| RefAdapter {
            layer: m.site.layer,
            projection: m.site.projection,
            a: mat(&m.a),
            b: mat(&m.b),
            scale: f64::from(m.alpha) / m.a.rows() as f64,
        })
        .collect()
}

/// All adapter entries, A then B per adapter, row-major.
pub fn flatten(adapters: &[RefAdapter]) -> Vec<f64> {
    let mut out = Vec::new();
    for ad in adapters {
        out.extend(ad.a.iter().flatten());
        out.extend(ad.b.iter().flatten());
    }
    out
}

/// Inverse of [`flatten`], writing `flat` into a copy of `like`.
pub fn unflatten(like: &[RefAdapter], flat: &[f64]) -> Vec<RefAdapter> {
    let mut it = flat.iter().copied();
    let mut out = like.to_vec();
    for ad in &mut out {
        for row in ad.a.iter_mut().chain(ad.b.iter_mut()) {
            for v in row.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        }
    }
    out
}

/// Logits for every row of `batch` (sequences handled independently).
pub fn ref_logits(base: &BaseModel, adapters: &[RefAdapter], batch: &Batch) -> Mat {
    let cfg = base.config;
    let tok = mat(&base.token_emb);
    let pos = mat(&base.pos_emb);
    let mut out = Vec::new();
    for seg in &batch.segments {
        let rows = seg.start..seg.start + seg.len;
        let mut h: Mat = rows
            .clone()
            .map(|i| tok[batch.ids[i]].iter().zip(&pos[batch.positions[i]]).map(|(a, b)| a + b).collect())
            .collect();
        for (l, lw) in base.layers.iter().enumerate() {
            let x = layer_norm(&h, &mat(&lw.ln1_gain)[0], &mat(&lw.ln1_bias)[0]);
            let project = |w: &Matrix, proj: Option<Projection>| {
                let mut y = mul_t(&x, &mat(w));
                for ad in adapters.iter().filter(|a| Some(a.projection) == proj && a.layer == l) {
                    let inner = mul_t(&x, &ad.a);
                    let delta = mul_t(&inner, &ad.b);
                    for (yr, dr) in y.iter_mut().zip(&delta) {
                        for (yv, dv) in yr.iter_mut().zip(dr) {
                            *yv += ad.scale * dv;
                        }
                    }
                }
                y
            };
            let q = project(&lw.query, Some(Projection::Query));
            let k = project(&lw.key, None);
            let v = project(&lw.value, Some(Projection::Value));
            let t = q.len();
            let dh = cfg.d_model / cfg.heads;
            let mut att = vec![vec![0.0; cfg.d_model]; t];
            for hd in 0..cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for c in cols.clone() {
                            att[i][c] += ej / z * v[j][c];
                        }
                    }
                }
            }
            h = add(&h, &mul_t(&att, &mat(&lw.output)));
            let x2 = layer_norm(&h, &mat(&lw.ln2_gain)[0], &mat(&lw.ln2_bias)[0]);
            let up: Mat = mul_t(&x2, &mat(&lw.mlp_up))
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            h = add(&h, &mul_t(&up, &mat(&lw.mlp_down)));
        }
        let hf = layer_norm(&h, &mat(&base.final_gain)[0], &mat(&base.final_bias)[0]);
        out.extend(mul_t(&hf, &mat(&base.head)));
    }
    out
}

/// Mean negative log-likelihood over the rows that carry a target.
pub fn ref_loss(base: &BaseModel, adapters: &[RefAdapter], batch: &Batch) -> f64 {
    let logits = ref_logits(base, adapters, batch);
    let mut total = 0.0;
    let mut n = 0;
    for (row, t) in logits.iter().zip(&batch.targets) {
        let Some(t) = *t else { continue };
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    total / n as f64
}

/// LCS length by enumerating every subsequence of `a` (|a| ≤ ~16).
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    assert!(a.len() <= 16, "brute force only for short sequences");
    let is_subseq = |mask: u32| {
        let mut j = 0;
        for (i, x) in a.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            while j < b.len() && b[j] != *x {
                j += 1;
            }
            if j == b.len() {
                return false;
            }
            j += 1;
        }
        true
    };
    (0u32..1 << a.len())
        .filter(|&m| is_subseq(m))
        .map(|m| m.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

pub fn brute_rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = brute_lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Sentence BLEU-4 via nested-loop n-gram matching with explicit clipping;
/// zero-match orders above 1 use 1/(total + 1), zero unigram matches give 0.
pub fn second_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4usize {
        let total = if hyp.len() >= n { hyp.len() - n + 1 } else { 0 };
        let mut used = vec![false; if reference.len() >= n { reference.len() - n + 1 } else { 0 }];
        let mut matches = 0;
        for i in 0..total {
            if let Some(j) = (0..used.len()).find(|&j| !used[j] && reference[j..j + n] == hyp[i..i + n]) {
                used[j] = true;
                matches += 1;
            }
        }
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_p += p.ln() / 4.0;
    }
    let c = hyp.len() as f64;
    let r = reference.len() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * log_p.exp()
}
