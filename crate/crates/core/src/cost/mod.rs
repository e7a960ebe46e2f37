//! Analytic training FLOPs.
//!
//! One multiply-accumulate counts as 2 FLOPs and a training step costs three
//! forward passes. Attention projections, score and value products, the FFN
//! and the tied output projection are counted; normalization, softmax and
//! biases are not.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelConfig};
use crate::partial::PartialSpec;

/// Forward + backward relative to a forward pass.
pub const TRAIN_MULTIPLIER: f64 = 3.0;

/// Mean sequence lengths of a workload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqProfile {
    /// Encoder input tokens, prompt excluded.
    pub n_in: f64,
    /// Decoder positions (target tokens including EOS).
    pub n_out: f64,
    /// Zero when no prompt is prepended.
    pub prompt_len: f64,
}

impl SeqProfile {
    pub fn new(n_in: f64, n_out: f64, prompt_len: f64) -> Result<Self> {
        let s = SeqProfile { n_in, n_out, prompt_len };
        s.validate()?;
        Ok(s)
    }

    /// Averages over `examples`; targets count their EOS.
    pub fn from_examples(examples: &[Example], prompt_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("examples"));
        }
        let n = examples.len() as f64;
        let n_in = examples.iter().map(|e| e.input.len()).sum::<usize>() as f64 / n;
        let n_out = examples.iter().map(|e| e.target.len() + 1).sum::<usize>() as f64 / n;
        SeqProfile::new(n_in, n_out, prompt_len as f64)
    }

    fn validate(&self) -> Result<()> {
        if !(self.n_in >= 1.0 && self.n_out >= 1.0 && self.prompt_len >= 0.0) {
            return Err(Error::InvalidArgument(format!("sequence lengths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Encoder positions `s = l + n_in`.
    pub fn enc_positions(&self) -> f64 {
        self.prompt_len + self.n_in
    }
}

/// Forward FLOPs of one encoder layer with `width` active FFN neurons.
pub fn encoder_layer_flops(d: f64, width: f64, seq: &SeqProfile) -> f64 {
    let s = seq.enc_positions();
    8.0 * s * d * d + 4.0 * s * s * d + 4.0 * s * d * width
}

/// Forward FLOPs of one decoder layer with `width` active FFN neurons.
pub fn decoder_layer_flops(d: f64, width: f64, seq: &SeqProfile) -> f64 {
    let (s, t) = (seq.enc_positions(), seq.n_out);
    let self_attn = 8.0 * t * d * d + 4.0 * t * t * d;
    let cross_attn = 4.0 * t * d * d + 4.0 * t * s * d + 4.0 * t * d * d;
    self_attn + cross_attn + 4.0 * t * d * width
}

/// Forward FLOPs of the embedding lookup and tied output projection.
pub fn embedding_flops(config: &ModelConfig, seq: &SeqProfile) -> f64 {
    2.0 * (seq.enc_positions() + seq.n_out) * config.d_model as f64 * config.vocab_size as f64
}

/// Training FLOPs for one example through the partial model `spec`.
pub fn step_flops(config: &ModelConfig, spec: &PartialSpec, seq: &SeqProfile) -> Result<f64> {
    spec.validate(config)?;
    seq.validate()?;
    let d = config.d_model as f64;
    let enc: f64 = spec.enc_widths().iter().map(|&w| encoder_layer_flops(d, w as f64, seq)).sum();
    let dec: f64 = spec.dec_widths().iter().map(|&w| decoder_layer_flops(d, w as f64, seq)).sum();
    Ok(TRAIN_MULTIPLIER * (enc + dec + embedding_flops(config, seq)))
}

/// `step_flops(spec) / step_flops(identity)`.
pub fn relative_cost(config: &ModelConfig, spec: &PartialSpec, seq: &SeqProfile) -> Result<f64> {
    Ok(step_flops(config, spec, seq)? / step_flops(config, &PartialSpec::identity(config), seq)?)
}

/// `Σ fraction_i × relative_i`.
pub fn schedule_relative_cost(per_stage_relative: &[f64], step_fractions: &[f64]) -> Result<f64> {
    if per_stage_relative.len() != step_fractions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} relative costs for {} step fractions",
            per_stage_relative.len(),
            step_fractions.len()
        )));
    }
    if per_stage_relative.is_empty() {
        return Err(Error::Empty("schedule"));
    }
    let total: f64 = step_fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || step_fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::InvalidArgument(format!("step fractions sum to {total}, expected 1")));
    }
    if per_stage_relative.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidArgument("relative costs must be positive and finite".into()));
    }
    Ok(per_stage_relative.iter().zip(step_fractions).map(|(r, f)| r * f).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub label: String,
    pub steps: usize,
    pub fraction: f64,
    /// Training FLOPs per example.
    pub flops: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    /// Training FLOPs per example of the full model.
    pub full_flops: f64,
    pub weighted_relative: f64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,label,steps,fraction,flops_per_example,relative\n");
        for (i, st) in self.stages.iter().enumerate() {
            writeln!(
                s,
                "{},{},{},{:.6},{:.6e},{:.6}",
                i + 1,
                st.label,
                st.steps,
                st.fraction,
                st.flops,
                st.relative
            )
            .unwrap();
        }
        writeln!(s, "weighted,,,,,{:.6}", self.weighted_relative).unwrap();
        s
    }
}

/// Per-stage relative costs against the full model, weighted by each stage's
/// share of the total steps.
pub fn schedule_cost_from_specs(
    config: &ModelConfig,
    stages: &[(String, &PartialSpec, usize)],
    seq: &SeqProfile,
) -> Result<CostReport> {
    let total: usize = stages.iter().map(|(_, _, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty("schedule steps"));
    }
    let full = step_flops(config, &PartialSpec::identity(config), seq)?;
    let stages = stages
        .iter()
        .map(|(label, spec, steps)| {
            let flops = step_flops(config, spec, seq)?;
            Ok(StageCost {
                label: label.clone(),
                steps: *steps,
                fraction: *steps as f64 / total as f64,
                flops,
                relative: flops / full,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rel: Vec<f64> = stages.iter().map(|s| s.relative).collect();
    let frac: Vec<f64> = stages.iter().map(|s| s.fraction).collect();
    Ok(CostReport {
        weighted_relative: schedule_relative_cost(&rel, &frac)?,
        stages,
        full_flops: full,
    })
}
