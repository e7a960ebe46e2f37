use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Metrics;
use crate::model::SoftPrompt;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Steps completed when the evaluation ran.
    pub step: usize,
    pub stage: usize,
    pub em: f64,
    pub loss: f64,
}

impl EvalPoint {
    pub fn new(step: usize, stage: usize, m: Metrics) -> Self {
        EvalPoint {
            step,
            stage,
            em: m.em,
            loss: m.loss,
        }
    }
}

/// Everything a training run reports, step by step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// Minibatch loss of each step, measured before that step's update.
    pub losses: Vec<f32>,
    pub stage_of_step: Vec<usize>,
    /// Modeled training FLOPs consumed through each step.
    pub cum_flops: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Global step at which each later stage begins.
    pub boundaries: Vec<usize>,
    /// Prompt at the end of each stage.
    pub stage_prompts: Vec<SoftPrompt>,
    /// File holding the final prompt, once written.
    pub prompt_checkpoint: Option<String>,
}

impl RunRecord {
    pub fn new(boundaries: Vec<usize>) -> Self {
        RunRecord {
            losses: Vec::new(),
            stage_of_step: Vec::new(),
            cum_flops: Vec::new(),
            evals: Vec::new(),
            boundaries,
            stage_prompts: Vec::new(),
            prompt_checkpoint: None,
        }
    }

    pub(crate) fn push_step(&mut self, stage: usize, loss: f32, cum_flops: f64) {
        self.losses.push(loss);
        self.stage_of_step.push(stage);
        self.cum_flops.push(cum_flops);
    }

    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn final_eval(&self) -> Option<&EvalPoint> {
        self.evals.last()
    }

    /// First step (1-based) at which the mean loss of the last `window`
    /// steps is at most `threshold`.
    pub fn steps_to_loss(&self, threshold: f32, window: usize) -> Option<usize> {
        let w = window.max(1);
        let mut sum = 0f64;
        for (i, &l) in self.losses.iter().enumerate() {
            sum += l as f64;
            if i >= w {
                sum -= self.losses[i - w] as f64;
            }
            if i + 1 >= w && sum / w as f64 <= threshold as f64 {
                return Some(i + 1);
            }
        }
        None
    }

    /// `step,stage,loss,cum_flops` with 1-based steps and stages.
    pub fn record_csv(&self) -> String {
        let mut s = String::from("step,stage,loss,cum_flops\n");
        for (i, ((l, st), f)) in self.losses.iter().zip(&self.stage_of_step).zip(&self.cum_flops).enumerate() {
            writeln!(s, "{},{},{:.6},{:.6e}", i + 1, st + 1, l, f).unwrap();
        }
        s
    }

    /// `step,em,loss`.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,em,loss\n");
        for e in &self.evals {
            writeln!(s, "{},{:.6},{:.6}", e.step, e.em, e.loss).unwrap();
        }
        s
    }
}
