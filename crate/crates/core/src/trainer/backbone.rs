use super::{evaluate, EvalPoint, Hyper, RunRecord, Sampler};
use crate::autodiff::Tape;
use crate::cost::{step_flops, SeqProfile};
use crate::error::{Error, Result};
use crate::model::{build_loss, forward_full, init_weights, BoundModel, ModelConfig, ModelWeights, SoftPrompt, TokenBatch};
use crate::optim::Optimizer;
use crate::partial::PartialSpec;
use crate::rng::seeded_rng;
use crate::tasks::{pretrain_example, Corpus, PretrainMode, TaskData};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub weights: ModelWeights,
    pub losses: Vec<f32>,
}

/// The prompt that pretraining places in front of `mode` examples: the
/// sentinel's embedding in every prompt slot.
pub fn sentinel_prompt(weights: &ModelWeights, mode: PretrainMode) -> SoftPrompt {
    let row = weights.embed.row(mode.sentinel() as usize);
    let data: Vec<f32> = (0..weights.config.prompt_len).flat_map(|_| row.iter().copied()).collect();
    SoftPrompt::new(Tensor::new(vec![weights.config.prompt_len, weights.config.d_model], data).expect("shape"))
        .expect("finite embedding")
}

/// Full-parameter training on the corpus. Every step picks one objective
/// and fills the prompt slots with its sentinel embedding.
pub fn pretrain(config: &ModelConfig, corpus: &Corpus, steps: usize, hyper: &Hyper) -> Result<ModelWeights> {
    Ok(pretrain_with_losses(config, corpus, steps, hyper)?.weights)
}

pub fn pretrain_with_losses(config: &ModelConfig, corpus: &Corpus, steps: usize, hyper: &Hyper) -> Result<PretrainReport> {
    hyper.validate()?;
    if corpus.sequences.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut weights = init_weights(config, &seeded_rng(hyper.seed, "backbone"))?;
    let mut sampler = Sampler::new(corpus.sequences.len(), seeded_rng(hyper.seed, "pretrain-batches"));
    let mut rng = seeded_rng(hyper.seed, "pretrain-modes");
    let mut opt = Optimizer::new(hyper.optimizer);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mode = PretrainMode::ALL[rng.below(PretrainMode::ALL.len())];
        let examples: Vec<_> = sampler
            .next_indices(hyper.batch_size)
            .into_iter()
            .map(|i| pretrain_example(mode, &corpus.sequences[i], &mut rng))
            .collect();
        let batch = TokenBatch::new(&examples);
        let grads = {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &weights, true);
            let prompt = tape.gather(model.embedding(), vec![mode.sentinel() as usize; config.prompt_len])?;
            let (loss, _) = build_loss(&mut tape, &model, None, Some(prompt), &batch, None)?;
            losses.push(tape.value(loss).item());
            tape.grad(loss, &model.vars)?
        };
        opt.step(&mut weights.tensors_mut(), &grads, hyper.learning_rate)?;
    }
    Ok(PretrainReport { weights, losses })
}

/// Mean teacher-forced loss over `sequences`, each objective in turn.
pub fn corpus_loss(weights: &ModelWeights, corpus: &Corpus, seed: u64) -> Result<f64> {
    if corpus.sequences.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = seeded_rng(seed, "corpus-loss");
    let mut total = 0f64;
    let mut tokens = 0usize;
    for mode in PretrainMode::ALL {
        let prompt = sentinel_prompt(weights, mode);
        for chunk in corpus.sequences.chunks(64) {
            let examples: Vec<_> = chunk.iter().map(|s| pretrain_example(mode, s, &mut rng)).collect();
            let batch = TokenBatch::new(&examples);
            let n: usize = batch.targets().iter().map(Vec::len).sum();
            total += forward_full(weights, Some(&prompt), &batch)?.loss as f64 * n as f64;
            tokens += n;
        }
    }
    Ok(total / tokens as f64)
}

/// Trains every weight on the task with no prompt. Used only as a
/// convergence-speed reference for prompt tuning.
pub fn finetune_baseline(
    weights: &ModelWeights,
    task: &TaskData,
    steps: usize,
    hyper: &Hyper,
) -> Result<(ModelWeights, RunRecord)> {
    hyper.validate()?;
    if task.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let cfg = weights.config.clone();
    let full = PartialSpec::identity(&cfg);
    let seq = SeqProfile::from_examples(&task.train, 0)?;
    let per_step = hyper.batch_size as f64 * step_flops(&cfg, &full, &seq)?;
    let dev = super::eval_set(task, hyper);
    let mut weights = weights.clone();
    let mut sampler = Sampler::new(task.train.len(), seeded_rng(hyper.seed, "batches"));
    let mut opt = Optimizer::new(hyper.optimizer);
    let mut record = RunRecord::new(Vec::new());
    if !dev.is_empty() {
        record.evals.push(EvalPoint::new(0, 0, evaluate(&weights, &full, None, dev)?));
    }
    for step in 1..=steps {
        let idx = sampler.next_indices(hyper.batch_size);
        let batch = TokenBatch::new(idx.iter().map(|&i| &task.train[i]));
        let (loss, grads) = {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &weights, true);
            let (loss, _) = build_loss(&mut tape, &model, None, None, &batch, None)?;
            (tape.value(loss).item(), tape.grad(loss, &model.vars)?)
        };
        opt.step(&mut weights.tensors_mut(), &grads, hyper.learning_rate)?;
        record.push_step(0, loss, per_step * step as f64);
        let periodic = hyper.eval_every > 0 && step % hyper.eval_every == 0;
        if !dev.is_empty() && (periodic || step == steps) {
            record.evals.push(EvalPoint::new(step, 0, evaluate(&weights, &full, None, dev)?));
        }
    }
    Ok((weights, record))
}
