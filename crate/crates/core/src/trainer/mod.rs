//! Prompt tuning, progressive prompt tuning, backbone pretraining and the
//! fine-tuning baseline.

mod backbone;
mod record;
mod rundir;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cost::{step_flops, SeqProfile};
use crate::error::{Error, Result};
use crate::model::{build_loss, forward, greedy_decode_batch, BoundModel, Example, ModelConfig, ModelWeights, SoftPrompt, TokenBatch};
use crate::optim::{Optimizer, OptimizerKind};
use crate::partial::PartialSpec;
use crate::rng::{seeded_rng, Rng};
use crate::schedule::Schedule;
use crate::tasks::TaskData;

pub use backbone::{corpus_loss, sentinel_prompt, finetune_baseline, pretrain, pretrain_with_losses, PretrainReport};
pub use record::{EvalPoint, RunRecord};
pub use rundir::{write_run_dir, RunFiles};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    pub eval_every: usize,
    pub seed: u64,
    /// Standard deviation of the random prompt initialization.
    pub prompt_std: f32,
    /// Clear optimizer moments when a new stage begins.
    pub reset_optimizer: bool,
    /// Dev examples used per evaluation; 0 uses the whole dev set.
    pub eval_size: usize,
}

impl Hyper {
    pub fn prompt_tuning(seed: u64) -> Self {
        Hyper {
            learning_rate: 0.1,
            batch_size: 16,
            optimizer: OptimizerKind::AdafactorSimplified,
            eval_every: 0,
            seed,
            prompt_std: 0.5,
            reset_optimizer: true,
            eval_size: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.prompt_std >= 0.0) {
            return Err(Error::Config("prompt_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// The random starting prompt for `hyper.seed`.
pub fn init_prompt(config: &ModelConfig, hyper: &Hyper) -> SoftPrompt {
    SoftPrompt::random(config, &mut seeded_rng(hyper.seed, "prompt"), hyper.prompt_std)
}

/// Epoch-wise shuffled minibatches.
pub(crate) struct Sampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub(crate) fn new(n: usize, rng: Rng) -> Self {
        Sampler {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next_indices(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Exact-match accuracy and mean token loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub em: f64,
    pub loss: f64,
    pub count: usize,
}

const EVAL_BATCH: usize = 64;

/// Greedy-decodes every example; EM is the fraction decoded exactly.
pub fn evaluate(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt: Option<&SoftPrompt>,
    dataset: &[Example],
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let max_out = dataset.iter().map(|e| e.target.len()).max().unwrap_or(0) + 1;
    let mut hits = 0usize;
    let mut loss_sum = 0f64;
    let mut tokens = 0usize;
    for chunk in dataset.chunks(EVAL_BATCH) {
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|e| e.input.clone()).collect();
        let decoded = greedy_decode_batch(weights, spec, prompt, &inputs, max_out)?;
        hits += decoded.iter().zip(chunk).filter(|(d, e)| **d == e.target).count();
        let batch = TokenBatch::new(chunk);
        let n: usize = batch.targets().iter().map(Vec::len).sum();
        loss_sum += forward(weights, spec, prompt, &batch)?.loss as f64 * n as f64;
        tokens += n;
    }
    Ok(Metrics {
        em: hits as f64 / dataset.len() as f64,
        loss: loss_sum / tokens as f64,
        count: dataset.len(),
    })
}

/// The prompt lives in the embedding space of width `d`, which every partial
/// model shares, so it transfers unchanged.
pub fn recycle_prompt(
    prompt: &SoftPrompt,
    from: &PartialSpec,
    to: &PartialSpec,
    config: &ModelConfig,
) -> Result<SoftPrompt> {
    from.validate(config)?;
    to.validate(config)?;
    if prompt.width() != config.d_model {
        return Err(Error::IncompatibleSpec(format!(
            "prompt width {} does not match d_model {}",
            prompt.width(),
            config.d_model
        )));
    }
    Ok(prompt.clone())
}

/// One teacher-forced step: loss and gradient with respect to the prompt.
pub fn prompt_loss_and_grad(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt: &SoftPrompt,
    batch: &TokenBatch,
) -> Result<(f32, crate::tensor::Tensor)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, weights, false);
    let p = tape.param(prompt.matrix().clone());
    let (loss, _) = build_loss(&mut tape, &model, Some(spec), Some(p), batch, None)?;
    let g = tape.grad(loss, &[p])?.remove(0);
    Ok((tape.value(loss).item(), g))
}

fn eval_set<'a>(task: &'a TaskData, hyper: &Hyper) -> &'a [Example] {
    match hyper.eval_size {
        0 => &task.dev,
        n => &task.dev[..n.min(task.dev.len())],
    }
}

/// Vanilla prompt tuning of `spec` for `steps` steps, updating only the prompt.
pub fn pt_train(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt_init: &SoftPrompt,
    task: &TaskData,
    steps: usize,
    hyper: &Hyper,
) -> Result<(SoftPrompt, RunRecord)> {
    spec.validate(&weights.config)?;
    let schedule = Schedule::single(spec.clone(), steps);
    run_schedule(weights, &schedule, prompt_init.clone(), task, hyper)
}

/// Progressive prompt tuning: each stage starts from the previous stage's
/// final prompt; the first starts from [`init_prompt`].
pub fn fpt_train(
    weights: &ModelWeights,
    schedule: &Schedule,
    task: &TaskData,
    hyper: &Hyper,
) -> Result<(SoftPrompt, RunRecord)> {
    schedule.validate(&weights.config)?;
    run_schedule(weights, schedule, init_prompt(&weights.config, hyper), task, hyper)
}

fn run_schedule(
    weights: &ModelWeights,
    schedule: &Schedule,
    mut prompt: SoftPrompt,
    task: &TaskData,
    hyper: &Hyper,
) -> Result<(SoftPrompt, RunRecord)> {
    hyper.validate()?;
    let cfg = &weights.config;
    prompt.check(cfg)?;
    if schedule.stages.is_empty() {
        return Err(Error::Empty("schedule"));
    }
    if task.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let seq = SeqProfile::from_examples(&task.train, cfg.prompt_len)?;
    let dev = eval_set(task, hyper);
    let mut sampler = Sampler::new(task.train.len(), seeded_rng(hyper.seed, "batches"));
    let mut opt = Optimizer::new(hyper.optimizer);
    let mut record = RunRecord::new(schedule.boundaries());
    let mut step = 0usize;
    let mut flops = 0f64;

    let first = &schedule.stages[0].spec;
    if !dev.is_empty() {
        record.evals.push(EvalPoint::new(0, 0, evaluate(weights, first, Some(&prompt), dev)?));
    }
    for (si, stage) in schedule.stages.iter().enumerate() {
        if si > 0 {
            prompt = recycle_prompt(&prompt, &schedule.stages[si - 1].spec, &stage.spec, cfg)?;
            if hyper.reset_optimizer {
                opt.reset();
            }
        }
        let per_step = hyper.batch_size as f64 * step_flops(cfg, &stage.spec, &seq)?;
        for _ in 0..stage.steps {
            let idx = sampler.next_indices(hyper.batch_size);
            let batch = TokenBatch::new(idx.iter().map(|&i| &task.train[i]));
            let (loss, grad) = prompt_loss_and_grad(weights, &stage.spec, &prompt, &batch)?;
            opt.step(&mut [prompt.matrix_mut()], &[grad], hyper.learning_rate)?;
            step += 1;
            flops += per_step;
            record.push_step(si, loss, flops);
            if hyper.eval_every > 0 && step % hyper.eval_every == 0 && step < schedule.total_steps() && !dev.is_empty() {
                record.evals.push(EvalPoint::new(step, si, evaluate(weights, &stage.spec, Some(&prompt), dev)?));
            }
        }
        record.stage_prompts.push(prompt.clone());
    }
    let last = schedule.stages.len() - 1;
    if step > 0 && !dev.is_empty() {
        let spec = &schedule.stages[last].spec;
        record.evals.push(EvalPoint::new(step, last, evaluate(weights, spec, Some(&prompt), dev)?));
    }
    Ok((prompt, record))
}
