use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelConfig};
use crate::rng::{seeded_rng, Rng};
use crate::tokens::{self, FIRST_CONTENT, MASK, MODE_CONTINUE, MODE_RECONSTRUCT, MODE_REVERSE, MODE_SPAN};

/// Parameters of the stochastic grammar behind the pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per token in the Markov chain.
    pub branching: usize,
    /// Chance that the next token ignores the chain and is drawn uniformly.
    pub jump_prob: f64,
}

impl CorpusSpec {
    pub fn for_config(config: &ModelConfig) -> Self {
        CorpusSpec {
            min_len: 2,
            max_len: 12.min(config.max_input_len()).min(config.max_len - 1),
            branching: 4,
            jump_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
}

/// Index in `0..weights.len()` drawn proportionally to `weights`.
fn draw(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() as f64 * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Sequences from a seeded Markov chain over content ids. Start tokens and
/// successor choices follow Zipf weights `1/r`, so token frequencies are
/// strongly skewed; occasional uniform jumps keep every id reachable.
pub fn gen_pretrain_corpus(config: &ModelConfig, size: usize, seed: u64) -> Result<Corpus> {
    gen_corpus_with(config, &CorpusSpec::for_config(config), size, seed)
}

pub fn gen_corpus_with(config: &ModelConfig, spec: &CorpusSpec, size: usize, seed: u64) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::Empty("corpus"));
    }
    let n = tokens::content_count(config.vocab_size);
    if n < 2 || spec.min_len < 2 || spec.min_len > spec.max_len || spec.branching == 0 {
        return Err(Error::Config("corpus grammar is degenerate".into()));
    }
    let mut grammar = seeded_rng(seed, "grammar");
    let zipf = |k: usize| (1..=k).map(|r| 1.0 / r as f64).collect::<Vec<f64>>();
    let start_order: Vec<usize> = grammar.sample_indices(n, n);
    let successors: Vec<Vec<usize>> = (0..n).map(|_| grammar.sample_indices(n, spec.branching.min(n))).collect();
    let start_w = zipf(n);
    let succ_w = zipf(spec.branching.min(n));

    let mut rng = seeded_rng(seed, "corpus");
    let sequences = (0..size)
        .map(|_| {
            let len = rng.range_inclusive(spec.min_len, spec.max_len);
            let mut cur = start_order[draw(&mut rng, &start_w)];
            let mut seq = Vec::with_capacity(len);
            seq.push(FIRST_CONTENT + cur as u32);
            while seq.len() < len {
                cur = if (rng.uniform() as f64) < spec.jump_prob {
                    rng.below(n)
                } else {
                    successors[cur][draw(&mut rng, &succ_w)]
                };
                seq.push(FIRST_CONTENT + cur as u32);
            }
            seq
        })
        .collect();
    Ok(Corpus { sequences })
}

/// Pretraining objectives. Each is announced by its sentinel id, which fills
/// the prompt slots during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PretrainMode {
    Reconstruct,
    Reverse,
    Span,
    Continue,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 4] = [
        PretrainMode::Reconstruct,
        PretrainMode::Reverse,
        PretrainMode::Span,
        PretrainMode::Continue,
    ];

    pub fn sentinel(self) -> u32 {
        match self {
            PretrainMode::Reconstruct => MODE_RECONSTRUCT,
            PretrainMode::Reverse => MODE_REVERSE,
            PretrainMode::Span => MODE_SPAN,
            PretrainMode::Continue => MODE_CONTINUE,
        }
    }
}

/// Turns one corpus sequence (length >= 2) into an example of `mode`.
pub fn pretrain_example(mode: PretrainMode, seq: &[u32], rng: &mut Rng) -> Example {
    let n = seq.len();
    match mode {
        PretrainMode::Reconstruct => Example {
            input: seq.to_vec(),
            target: seq.to_vec(),
        },
        PretrainMode::Reverse => Example {
            input: seq.to_vec(),
            target: seq.iter().rev().copied().collect(),
        },
        PretrainMode::Span => {
            let span = 1 + rng.below(3.min(n - 1));
            let start = rng.below(n - span + 1);
            let mut input = seq[..start].to_vec();
            input.push(MASK);
            input.extend_from_slice(&seq[start + span..]);
            Example {
                input,
                target: seq[start..start + span].to_vec(),
            }
        }
        PretrainMode::Continue => {
            let cut = 1 + rng.below(n - 1);
            Example {
                input: seq[..cut].to_vec(),
                target: seq[cut..].to_vec(),
            }
        }
    }
}
