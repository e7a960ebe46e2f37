//! Synthetic sequence-to-sequence tasks and the pretraining corpus.

mod corpus;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, TokenBatch};
use crate::rng::{seeded_rng, Rng};
use crate::tokens::{self, FIRST_CONTENT, MASK};

pub use corpus::{gen_corpus_with, gen_pretrain_corpus, pretrain_example, Corpus, CorpusSpec, PretrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
    PatternClassify,
    SpanFill,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ModularSum,
        TaskKind::PatternClassify,
        TaskKind::SpanFill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularSum => "modular-sum",
            TaskKind::PatternClassify => "pattern-classify",
            TaskKind::SpanFill => "span-fill",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind {s:?}")))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Inclusive range of input lengths.
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    /// Modulus for `modular-sum`; input digits are drawn from `0..base`.
    pub base: usize,
}

impl TaskSpec {
    /// Defaults sized for the tiny model: inputs of 3 to 8 tokens.
    pub fn new(kind: TaskKind, vocab_size: usize, seed: u64) -> Self {
        TaskSpec {
            kind,
            vocab_size,
            min_len: 3,
            max_len: 8,
            train_size: 2000,
            dev_size: 100,
            seed,
            base: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let content = tokens::content_count(self.vocab_size);
        if content < 2 {
            return fail(format!("vocab_size {} leaves fewer than 2 content ids", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("input length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.kind == TaskKind::SpanFill && self.min_len < 2 {
            return fail("span-fill inputs need at least 2 tokens".into());
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return fail("train and dev sizes must be >= 1".into());
        }
        if self.kind == TaskKind::ModularSum && !(2..=content).contains(&self.base) {
            return fail(format!("modular-sum base {} outside 2..={content}", self.base));
        }
        Ok(())
    }

    fn alphabet(&self) -> u32 {
        match self.kind {
            TaskKind::ModularSum => self.base as u32,
            _ => tokens::content_count(self.vocab_size) as u32,
        }
    }
}

/// Train and dev examples. No input appears in both.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskData {
    /// Longest target, EOS excluded.
    pub fn max_target_len(&self) -> usize {
        self.train.iter().chain(&self.dev).map(|e| e.target.len()).max().unwrap_or(0)
    }
}

/// Consecutive batches of at most `size` examples.
pub fn batches(examples: &[Example], size: usize) -> Vec<TokenBatch> {
    examples.chunks(size.max(1)).map(TokenBatch::new).collect()
}

/// The hidden rule of `pattern-classify`: a seeded half of the content ids.
fn hidden_set(spec: &TaskSpec) -> Vec<bool> {
    let n = tokens::content_count(spec.vocab_size);
    let mut rng = seeded_rng(spec.seed, "pattern-rule");
    let mut set = vec![false; n];
    for i in rng.sample_indices(n, n / 2) {
        set[i] = true;
    }
    set
}

fn target_for(spec: &TaskSpec, input: &[u32], hidden: &[bool], rng: &mut Rng) -> (Vec<u32>, Vec<u32>) {
    match spec.kind {
        TaskKind::Copy => (input.to_vec(), input.to_vec()),
        TaskKind::Reverse => (input.to_vec(), input.iter().rev().copied().collect()),
        TaskKind::ModularSum => {
            let s: u32 = input.iter().map(|&t| t - FIRST_CONTENT).sum();
            (input.to_vec(), vec![FIRST_CONTENT + s % spec.base as u32])
        }
        TaskKind::PatternClassify => {
            let inside = input.iter().filter(|&&t| hidden[(t - FIRST_CONTENT) as usize]).count();
            let label = u32::from(2 * inside > input.len());
            (input.to_vec(), vec![FIRST_CONTENT + label])
        }
        TaskKind::SpanFill => {
            let n = input.len();
            let span = 1 + rng.below(3.min(n - 1));
            let start = rng.below(n - span + 1);
            let mut masked = input[..start].to_vec();
            masked.push(MASK);
            masked.extend_from_slice(&input[start + span..]);
            (masked, input[start..start + span].to_vec())
        }
    }
}

/// Deterministic train/dev split for one task.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, &format!("task/{}", spec.kind));
    let hidden = hidden_set(spec);
    let alphabet = spec.alphabet();
    let needed = spec.train_size + spec.dev_size;
    let mut seen = HashSet::with_capacity(needed);
    let mut out = Vec::with_capacity(needed);
    let mut attempts = 0usize;
    while out.len() < needed {
        attempts += 1;
        if attempts > 50 * needed + 1000 {
            return Err(Error::Config(format!(
                "could only draw {} distinct {} inputs of the {needed} requested",
                out.len(),
                spec.kind
            )));
        }
        let len = rng.range_inclusive(spec.min_len, spec.max_len);
        let raw: Vec<u32> = (0..len).map(|_| FIRST_CONTENT + rng.below(alphabet as usize) as u32).collect();
        let (input, target) = target_for(spec, &raw, &hidden, &mut rng);
        if seen.insert(input.clone()) {
            out.push(Example { input, target });
        }
    }
    let dev = out.split_off(spec.train_size);
    Ok(TaskData {
        spec: spec.clone(),
        train: out,
        dev,
    })
}

fn join(ids: &[u32]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{id}").unwrap();
    }
    s
}

/// `input_ids,target_ids` with space-separated ids.
pub fn examples_to_csv(examples: &[Example]) -> String {
    let mut s = String::from("input_ids,target_ids\n");
    for e in examples {
        writeln!(s, "{},{}", join(&e.input), join(&e.target)).unwrap();
    }
    s
}

pub fn examples_from_csv(text: &str) -> Result<Vec<Example>> {
    let mut lines = text.lines();
    if lines.next() != Some("input_ids,target_ids") {
        return Err(Error::InvalidArgument("missing input_ids,target_ids header".into()));
    }
    let ids = |field: &str| -> Result<Vec<u32>> {
        field
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("bad token id {t:?}"))))
            .collect()
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed row {l:?}")))?;
            Ok(Example {
                input: ids(a)?,
                target: ids(b)?,
            })
        })
        .collect()
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, examples_to_csv(examples))?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    examples_from_csv(&std::fs::read_to_string(path)?)
}
