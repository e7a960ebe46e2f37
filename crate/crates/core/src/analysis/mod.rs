//! Prompt pooling, cross-task prompt similarity, embedding export and
//! ablation summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SoftPrompt;
use crate::trainer::RunRecord;

/// Mean of the prompt rows, computed in f64.
pub fn mean_pool_prompt(p: &SoftPrompt) -> Vec<f64> {
    let (l, d) = (p.len(), p.width());
    let mut out = vec![0f64; d];
    for i in 0..l {
        for (o, &v) in out.iter_mut().zip(p.matrix().row(i)) {
            *o += v as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= l as f64);
    out
}

/// Cosine similarity. A zero vector is an error rather than a silent 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            detail: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEntry {
    pub label: String,
    pub prompt: SoftPrompt,
    pub full_model: bool,
}

/// The prompts one run produced for one task, one per partial model.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub task: String,
    pub seed: u64,
    pub entries: Vec<PromptEntry>,
}

impl PromptSet {
    pub fn new(task: impl Into<String>, seed: u64) -> Self {
        PromptSet {
            task: task.into(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, prompt: SoftPrompt, full_model: bool) {
        self.entries.push(PromptEntry {
            label: label.into(),
            prompt,
            full_model,
        });
    }

    pub fn partial(&self) -> impl Iterator<Item = &PromptEntry> {
        self.entries.iter().filter(|e| !e.full_model)
    }

    pub fn full(&self) -> Option<&PromptEntry> {
        self.entries.iter().find(|e| e.full_model)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("prompt set for {} is empty", self.task)))?;
        let shape = (first.prompt.len(), first.prompt.width());
        if let Some(e) = self.entries.iter().find(|e| (e.prompt.len(), e.prompt.width()) != shape) {
            return Err(Error::Shape {
                op: "prompt set",
                detail: format!("{} / {} differs from {:?}", self.task, e.label, shape),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// Tasks whose partial-model prompts form the rows.
    pub rows: Vec<String>,
    /// Tasks whose full-model prompts form the columns.
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// For each row whose task also labels a column: does that column hold
    /// the row's highest value? Ties go to the earliest column.
    pub fn diagonal_wins(&self) -> Vec<(String, bool)> {
        self.rows
            .iter()
            .zip(&self.values)
            .filter(|(r, _)| self.cols.contains(r))
            .map(|(r, vals)| {
                let best = vals
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > vals[b] { i } else { b });
                (r.clone(), self.cols[best] == *r)
            })
            .collect()
    }

    pub fn diagonal_win_count(&self) -> usize {
        self.diagonal_wins().iter().filter(|(_, w)| *w).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for c in &self.cols {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (r, vals) in self.rows.iter().zip(&self.values) {
            s.push_str(r);
            for v in vals {
                write!(s, ",{v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Entry `(j, k)` averages, over the partial-model prompts of task `j`, the
/// cosine between each pooled prompt and the pooled full-model prompt of
/// task `k`.
pub fn prompt_similarity(
    partial: &BTreeMap<String, PromptSet>,
    full: &BTreeMap<String, SoftPrompt>,
) -> Result<SimilarityMatrix> {
    if partial.is_empty() || full.is_empty() {
        return Err(Error::InvalidArgument("similarity needs partial and full prompts".into()));
    }
    let pooled_full = full
        .iter()
        .map(|(t, p)| (t.clone(), mean_pool_prompt(p)))
        .collect::<Vec<_>>();
    let mut values = Vec::with_capacity(partial.len());
    for (task, set) in partial {
        set.validate()?;
        let pooled: Vec<(&str, Vec<f64>)> = set.partial().map(|e| (e.label.as_str(), mean_pool_prompt(&e.prompt))).collect();
        if pooled.is_empty() {
            return Err(Error::InvalidArgument(format!("no partial-model prompts for {task}")));
        }
        let mut row = Vec::with_capacity(pooled_full.len());
        for (col, f) in &pooled_full {
            let mut sum = 0f64;
            for (label, p) in &pooled {
                sum += cosine(p, f).map_err(|_| {
                    Error::InvalidArgument(format!("zero-norm pooled prompt: {task}/{label} or full {col}"))
                })?;
            }
            row.push(sum / pooled.len() as f64);
        }
        values.push(row);
    }
    Ok(SimilarityMatrix {
        rows: partial.keys().cloned().collect(),
        cols: full.keys().cloned().collect(),
        values,
    })
}

/// Similarity between the partial prompts of each set and the full-model
/// prompts of the same sets.
pub fn similarity_from_sets(sets: &[PromptSet]) -> Result<SimilarityMatrix> {
    let mut partial = BTreeMap::new();
    let mut full = BTreeMap::new();
    for s in sets {
        let f = s
            .full()
            .ok_or_else(|| Error::InvalidArgument(format!("no full-model prompt for {}", s.task)))?;
        if partial.insert(s.task.clone(), s.clone()).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate task {}", s.task)));
        }
        full.insert(s.task.clone(), f.prompt.clone());
    }
    prompt_similarity(&partial, &full)
}

/// One row of an embedding export.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub task: String,
    pub model_label: String,
    pub seed: u64,
    pub vector: Vec<f64>,
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '"']) {
        return Err(Error::InvalidArgument(format!("label {s:?} cannot be written as a CSV field")));
    }
    Ok(())
}

/// `task,model_label,seed,c0..c{d-1}`, one row per prompt, components with
/// nine significant digits.
pub fn embeddings_csv(sets: &[PromptSet]) -> Result<String> {
    let first = sets
        .iter()
        .flat_map(|s| &s.entries)
        .next()
        .ok_or_else(|| Error::InvalidArgument("nothing to export".into()))?;
    let d = first.prompt.width();
    let mut s = String::from("task,model_label,seed");
    for i in 0..d {
        write!(s, ",c{i}").unwrap();
    }
    s.push('\n');
    for set in sets {
        set.validate()?;
        check_field(&set.task)?;
        for e in &set.entries {
            check_field(&e.label)?;
            if e.prompt.width() != d {
                return Err(Error::Shape {
                    op: "export",
                    detail: format!("{} / {} has width {}, expected {d}", set.task, e.label, e.prompt.width()),
                });
            }
            write!(s, "{},{},{}", set.task, e.label, set.seed).unwrap();
            for v in mean_pool_prompt(&e.prompt) {
                write!(s, ",{v:.8e}").unwrap();
            }
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn export_embeddings(sets: &[PromptSet], path: &Path) -> Result<usize> {
    let csv = embeddings_csv(sets)?;
    std::fs::write(path, &csv)?;
    Ok(csv.lines().count() - 1)
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let bad = |m: String| Error::InvalidArgument(format!("embeddings csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let d = header.split(',').count().checked_sub(3).ok_or_else(|| bad("short header".into()))?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 3 {
                return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
            }
            let vector = f[3..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
                .collect::<Result<_>>()?;
            Ok(EmbeddingRow {
                task: f[0].to_string(),
                model_label: f[1].to_string(),
                seed: f[2].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?,
                vector,
            })
        })
        .collect()
}

/// Final EM of one ablation arm for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub strategy: String,
    pub seed: u64,
    pub em: f64,
}

impl AblationRun {
    pub fn from_record(strategy: impl Into<String>, seed: u64, record: &RunRecord) -> Result<Self> {
        let em = record
            .final_eval()
            .ok_or_else(|| Error::InvalidArgument("run has no evaluation".into()))?
            .em;
        Ok(AblationRun {
            strategy: strategy.into(),
            seed,
            em,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub mean_em: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

/// Head-to-head of two strategies over their shared seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairWins {
    pub a: String,
    pub b: String,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    /// Mean of `em(a) - em(b)` over shared seeds.
    pub mean_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub strategies: Vec<StrategySummary>,
    pub pairs: Vec<PairWins>,
}

impl AblationReport {
    pub fn summary(&self, strategy: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&PairWins> {
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }

    /// `strategy,seed,em`; each strategy ends with a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seed,em\n");
        for st in &self.strategies {
            for (seed, em) in &st.per_seed {
                writeln!(s, "{},{seed},{em:.6}", st.strategy).unwrap();
            }
            writeln!(s, "{},mean,{:.6}", st.strategy, st.mean_em).unwrap();
        }
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("a,b,a_wins,b_wins,ties,mean_diff\n");
        for p in &self.pairs {
            writeln!(s, "{},{},{},{},{},{:.6}", p.a, p.b, p.a_wins, p.b_wins, p.ties, p.mean_diff).unwrap();
        }
        s
    }
}

/// Groups runs by strategy in first-seen order and compares every pair.
pub fn ablation_report(runs: &[AblationRun]) -> Result<AblationReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("ablation report needs at least one run".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in runs {
        check_field(&r.strategy)?;
        if !groups.contains_key(r.strategy.as_str()) {
            order.push(&r.strategy);
        }
        if groups.entry(&r.strategy).or_default().insert(r.seed, r.em).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate run {} seed {}", r.strategy, r.seed)));
        }
    }
    let strategies = order
        .iter()
        .map(|&name| {
            let per_seed = groups[name].clone();
            StrategySummary {
                strategy: name.to_string(),
                mean_em: per_seed.values().sum::<f64>() / per_seed.len() as f64,
                per_seed,
            }
        })
        .collect::<Vec<_>>();
    let mut pairs = Vec::new();
    for (i, a) in strategies.iter().enumerate() {
        for b in &strategies[i + 1..] {
            let shared: BTreeSet<u64> = a.per_seed.keys().filter(|k| b.per_seed.contains_key(k)).copied().collect();
            if shared.is_empty() {
                continue;
            }
            let (mut aw, mut bw, mut ties, mut diff) = (0, 0, 0, 0f64);
            for s in &shared {
                let (x, y) = (a.per_seed[s], b.per_seed[s]);
                diff += x - y;
                match x.partial_cmp(&y) {
                    Some(std::cmp::Ordering::Greater) => aw += 1,
                    Some(std::cmp::Ordering::Less) => bw += 1,
                    _ => ties += 1,
                }
            }
            pairs.push(PairWins {
                a: a.strategy.clone(),
                b: b.strategy.clone(),
                a_wins: aw,
                b_wins: bw,
                ties,
                mean_diff: diff / shared.len() as f64,
            });
        }
    }
    Ok(AblationReport { strategies, pairs })
}
