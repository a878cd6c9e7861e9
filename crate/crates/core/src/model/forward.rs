use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::adapter::{AdapterSet, Projection, Site};
use crate::model::base::BaseModel;
use crate::numerics::{Matrix, Segment, Tape, Var};

/// Reserved token ids shared by every vocabulary.
pub mod tokens {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const SEP: u32 = 3;
    /// First id available for task symbols.
    pub const FIRST_SYMBOL: u32 = 4;
}

/// Several sequences concatenated row-wise, with positions restarting at
/// zero for each sequence and optional next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    /// Raw sequences with no targets.
    pub fn from_sequences<'a>(
        seqs: impl IntoIterator<Item = &'a [u32]>,
        max_len: usize,
    ) -> Result<Self> {
        let mut batch = Batch {
            ids: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            targets: Vec::new(),
        };
        for seq in seqs {
            batch.push(seq, 0, max_len)?;
        }
        Ok(batch)
    }

    /// `[BOS] input [SEP] target [EOS]` per pair; only the positions that
    /// predict target tokens (and the closing EOS) carry a target.
    pub fn teacher_forced<'a>(
        pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>,
        max_len: usize,
    ) -> Result<Self> {
        let mut batch = Batch::from_sequences(std::iter::empty(), max_len)?;
        for (input, target) in pairs {
            let seq = full_sequence(input, target);
            batch.push(&seq, input.len() + 2, max_len)?;
        }
        Ok(batch)
    }

    fn push(&mut self, seq: &[u32], prompt_len: usize, max_len: usize) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::contract("empty sequence in batch"));
        }
        if seq.len() > max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds the configured max length {max_len}; truncate inputs",
                seq.len()
            )));
        }
        self.segments.push(Segment {
            start: self.ids.len(),
            len: seq.len(),
        });
        for (t, &tok) in seq.iter().enumerate() {
            self.ids.push(tok as usize);
            self.positions.push(t);
            let scored = prompt_len > 0 && t + 1 >= prompt_len && t + 1 < seq.len();
            self.targets.push(scored.then(|| seq[t + 1] as usize));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn scored_positions(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

pub fn prompt_sequence(input: &[u32]) -> Vec<u32> {
    let mut seq = Vec::with_capacity(input.len() + 2);
    seq.push(tokens::BOS);
    seq.extend_from_slice(input);
    seq.push(tokens::SEP);
    seq
}

pub fn full_sequence(input: &[u32], target: &[u32]) -> Vec<u32> {
    let mut seq = prompt_sequence(input);
    seq.extend_from_slice(target);
    seq.push(tokens::EOS);
    seq
}

pub(crate) struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    query: Var,
    key: Var,
    value: Var,
    output: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    mlp_up: Var,
    mlp_down: Var,
}

/// Base weights placed on a tape, in [`BaseModel::tensors`] order.
pub(crate) struct BaseVars {
    pub all: Vec<Var>,
    token_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_gain: Var,
    final_bias: Var,
    head: Var,
}

pub(crate) fn bind_base(tape: &mut Tape, base: &BaseModel, trainable: bool) -> BaseVars {
    let mut all = Vec::new();
    let mut put = |tape: &mut Tape, m: &Matrix| {
        let v = if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        };
        all.push(v);
        v
    };
    let token_emb = put(tape, &base.token_emb);
    let pos_emb = put(tape, &base.pos_emb);
    let layers = base
        .layers
        .iter()
        .map(|l| LayerVars {
            ln1_gain: put(tape, &l.ln1_gain),
            ln1_bias: put(tape, &l.ln1_bias),
            query: put(tape, &l.query),
            key: put(tape, &l.key),
            value: put(tape, &l.value),
            output: put(tape, &l.output),
            ln2_gain: put(tape, &l.ln2_gain),
            ln2_bias: put(tape, &l.ln2_bias),
            mlp_up: put(tape, &l.mlp_up),
            mlp_down: put(tape, &l.mlp_down),
        })
        .collect();
    let final_gain = put(tape, &base.final_gain);
    let final_bias = put(tape, &base.final_bias);
    let head = put(tape, &base.head);
    BaseVars {
        all,
        token_emb,
        pos_emb,
        layers,
        final_gain,
        final_bias,
        head,
    }
}

/// Adapter matrices on a tape, aligned with [`AdapterSet::modules`].
pub(crate) struct AdapterVars {
    pub a: Vec<Var>,
    pub b: Vec<Var>,
}

pub(crate) fn bind_adapters(tape: &mut Tape, set: &AdapterSet, trainable: bool) -> AdapterVars {
    let mut a = Vec::with_capacity(set.len());
    let mut b = Vec::with_capacity(set.len());
    for m in set.modules() {
        if trainable {
            a.push(tape.param(m.a.clone()));
            b.push(tape.param(m.b.clone()));
        } else {
            a.push(tape.constant(m.a.clone()));
            b.push(tape.constant(m.b.clone()));
        }
    }
    AdapterVars { a, b }
}

/// Builds the forward pass on `tape` and returns the `rows x vocab` logits.
///
/// With `dropout` set, each adapter sees its own inverted-dropout mask on its
/// input; without it the pass is deterministic (evaluation mode). When
/// `site_inputs` is given it receives, per layer, the normalised hidden
/// state that feeds the query and value projections.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    base: &BaseModel,
    bv: &BaseVars,
    set: &AdapterSet,
    av: &AdapterVars,
    batch: &Batch,
    mut dropout: Option<&mut ChaCha8Rng>,
    mut site_inputs: Option<&mut Vec<Matrix>>,
) -> Result<Var> {
    let config = &base.config;
    if let Some(&bad) = batch.ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if let Some(&bad) = batch.positions.iter().find(|&&p| p >= config.max_len) {
        return Err(Error::Contract(format!(
            "position {bad} exceeds the configured max length {}",
            config.max_len
        )));
    }

    // Group module indices by site once; set iteration order is site order.
    let mut by_site: Vec<(Site, Vec<usize>)> = Vec::new();
    for (i, m) in set.modules().enumerate() {
        match by_site.last_mut() {
            Some((s, idx)) if *s == m.site => idx.push(i),
            _ => by_site.push((m.site, vec![i])),
        }
    }
    let modules: Vec<_> = set.modules().collect();

    let tok = tape.gather(bv.token_emb, &batch.ids)?;
    let pos = tape.gather(bv.pos_emb, &batch.positions)?;
    let mut h = tape.add(tok, pos)?;

    for (layer, lv) in bv.layers.iter().enumerate() {
        let x = tape.layer_norm(h, lv.ln1_gain, lv.ln1_bias)?;
        if let Some(inputs) = site_inputs.as_deref_mut() {
            inputs.push(tape.value(x).clone());
        }
        let mut project = |tape: &mut Tape, w: Var, proj: Option<Projection>| -> Result<Var> {
            let mut y = tape.matmul_t(x, w)?;
            let Some(proj) = proj else { return Ok(y) };
            let site = Site::new(layer, proj);
            let Some((_, idx)) = by_site.iter().find(|(s, _)| *s == site) else {
                return Ok(y);
            };
            for &i in idx {
                let m = modules[i];
                let input = match dropout.as_deref_mut() {
                    Some(rng) if m.dropout > 0.0 => {
                        let keep = 1.0 - m.dropout;
                        let (rows, cols) = tape.value(x).shape();
                        let mask: Vec<f32> = (0..rows * cols)
                            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let mask = tape.constant(Matrix::from_raw(rows, cols, mask));
                        tape.mul(x, mask)?
                    }
                    _ => x,
                };
                let inner = tape.matmul_t(input, av.a[i])?;
                let delta = tape.matmul_t(inner, av.b[i])?;
                let delta = tape.scale(delta, m.scaling());
                y = tape.add(y, delta)?;
            }
            Ok(y)
        };
        let q = project(tape, lv.query, Some(Projection::Query))?;
        let k = project(tape, lv.key, None)?;
        let v = project(tape, lv.value, Some(Projection::Value))?;
        let att = tape.causal_attention(q, k, v, &batch.segments, config.heads)?;
        let att_out = tape.matmul_t(att, lv.output)?;
        h = tape.add(h, att_out)?;

        let x2 = tape.layer_norm(h, lv.ln2_gain, lv.ln2_bias)?;
        let up = tape.matmul_t(x2, lv.mlp_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul_t(act, lv.mlp_down)?;
        h = tape.add(h, down)?;
    }
    let hf = tape.layer_norm(h, bv.final_gain, bv.final_bias)?;
    tape.matmul_t(hf, bv.head)
}

/// Evaluation-mode logits for a batch.
pub fn forward_batch(base: &BaseModel, set: &AdapterSet, batch: &Batch) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bv = bind_base(&mut tape, base, false);
    let av = bind_adapters(&mut tape, set, false);
    let logits = forward_on_tape(&mut tape, base, &bv, set, &av, batch, None, None)?;
    Ok(tape.value(logits).clone())
}

/// Evaluation-mode logits (`len x vocab`) for one token sequence.
pub fn forward(base: &BaseModel, set: &AdapterSet, tokens: &[u32]) -> Result<Matrix> {
    let batch = Batch::from_sequences([tokens], base.config.max_len)?;
    forward_batch(base, set, &batch)
}

/// Mean token cross-entropy of `logits` against `targets`, ignoring `None`.
pub fn loss(logits: &Matrix, targets: &[Option<usize>]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.cross_entropy(l, targets)?;
    Ok(tape.value(out).as_slice()[0])
}

/// Evaluation-mode loss over a teacher-forced batch.
pub fn batch_loss(base: &BaseModel, set: &AdapterSet, batch: &Batch) -> Result<f32> {
    let logits = forward_batch(base, set, batch)?;
    loss(&logits, &batch.targets)
}

/// Per-layer inputs of the query/value projections, evaluation mode.
pub fn site_inputs(base: &BaseModel, set: &AdapterSet, batch: &Batch) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let bv = bind_base(&mut tape, base, false);
    let av = bind_adapters(&mut tape, set, false);
    let mut inputs = Vec::with_capacity(base.layers.len());
    forward_on_tape(&mut tape, base, &bv, set, &av, batch, None, Some(&mut inputs))?;
    Ok(inputs)
}
