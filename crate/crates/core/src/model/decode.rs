use super::forward::{decode_logits, encode, BoundModel, Encoded};
use super::{ModelWeights, SoftPrompt};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::partial::PartialSpec;
use crate::tokens::{BOS, EOS};

/// Greedy decoding of one input; the returned sequence excludes EOS.
pub fn greedy_decode(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt: Option<&SoftPrompt>,
    input: &[u32],
    max_out: usize,
) -> Result<Vec<u32>> {
    let mut out = greedy_decode_batch(weights, spec, prompt, &[input.to_vec()], max_out)?;
    Ok(out.pop().unwrap_or_default())
}

/// Greedy decoding of several inputs at once. Each step takes the argmax
/// logit, ties going to the lower token id, and a sequence stops at EOS or
/// after `max_out` tokens.
pub fn greedy_decode_batch(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt: Option<&SoftPrompt>,
    inputs: &[Vec<u32>],
    max_out: usize,
) -> Result<Vec<Vec<u32>>> {
    let cfg = &weights.config;
    if max_out == 0 {
        return Err(Error::InvalidArgument("max_out must be >= 1".into()));
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let max_out = max_out.min(cfg.max_len);
    if let Some(p) = prompt {
        p.check(cfg)?;
    }
    for x in inputs {
        if x.is_empty() || x.len() > cfg.max_input_len() {
            return Err(Error::InvalidArgument(format!(
                "input length {} outside 1..={}",
                x.len(),
                cfg.max_input_len()
            )));
        }
        if let Some(&id) = x.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::ReservedToken {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }

    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, weights, false);
    let p = prompt.map(|p| tape.constant(p.matrix().clone()));
    let enc = encode(&mut tape, &model, Some(spec), p, inputs, None)?;
    let memory = tape.value(enc.out).clone();

    let vocab = cfg.vocab_size;
    let mut seqs: Vec<Vec<u32>> = vec![Vec::new(); inputs.len()];
    let mut done = vec![false; inputs.len()];
    for step in 0..max_out {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, weights, false);
        let enc = Encoded {
            out: tape.constant(memory.clone()),
            valid: enc.valid.clone(),
            len: enc.len,
        };
        let dec_in: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut d = Vec::with_capacity(step + 1);
                d.push(BOS);
                d.extend_from_slice(s);
                d.resize(step + 1, EOS);
                d
            })
            .collect();
        let logits = decode_logits(&mut tape, &model, Some(spec), &enc, &dec_in, None)?;
        let logits = tape.value(logits);
        for (b, seq) in seqs.iter_mut().enumerate() {
            if done[b] {
                continue;
            }
            let row = logits.row(b * (step + 1) + step);
            let next = argmax(&row[..vocab]) as u32;
            if next == EOS {
                done[b] = true;
            } else {
                seq.push(next);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs)
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
