use crate::error::Result;
use crate::model::adapter::AdapterSet;
use crate::model::base::BaseModel;
use crate::model::forward::{forward, forward_batch, prompt_sequence, tokens, Batch};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy generation driven by an arbitrary next-token scorer. `next_logits`
/// receives the tokens generated so far and returns one score per vocabulary
/// entry. Stops at `eos` (not included) or after `max_new` tokens.
pub fn greedy_with<F>(mut next_logits: F, max_new: usize, eos: u32) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f32>>,
{
    let mut out = Vec::new();
    while out.len() < max_new {
        let scores = next_logits(&out)?;
        let tok = argmax(&scores) as u32;
        if tok == eos {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// Greedy summary of `input`: the model sees `[BOS] input [SEP]` and extends
/// it one argmax token at a time until EOS, `max_new` tokens, or the model's
/// maximum length.
pub fn greedy_decode(base: &BaseModel, set: &AdapterSet, input: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let prompt = prompt_sequence(input);
    let room = base.config.max_len.saturating_sub(prompt.len());
    let mut seq = prompt;
    greedy_with(
        |generated| {
            seq.truncate(input.len() + 2);
            seq.extend_from_slice(generated);
            let logits = forward(base, set, &seq)?;
            Ok(logits.row(logits.rows() - 1).to_vec())
        },
        max_new.min(room),
        tokens::EOS,
    )
}

/// [`greedy_decode`] for many inputs at once: every step runs one forward
/// pass over all unfinished sequences.
pub fn greedy_decode_batch(
    base: &BaseModel,
    set: &AdapterSet,
    inputs: &[&[u32]],
    max_new: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = inputs.iter().map(|i| prompt_sequence(i)).collect();
    let mut outs: Vec<Vec<u32>> = vec![Vec::new(); inputs.len()];
    let mut active: Vec<usize> = (0..inputs.len())
        .filter(|&i| seqs[i].len() < base.config.max_len && max_new > 0)
        .collect();
    while !active.is_empty() {
        let batch = Batch::from_sequences(active.iter().map(|&i| &seqs[i][..]), base.config.max_len)?;
        let logits = forward_batch(base, set, &batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, seg) in active.iter().zip(&batch.segments) {
            let tok = argmax(logits.row(seg.start + seg.len - 1)) as u32;
            if tok == tokens::EOS {
                continue;
            }
            outs[i].push(tok);
            seqs[i].push(tok);
            if outs[i].len() < max_new && seqs[i].len() < base.config.max_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outs)
}
