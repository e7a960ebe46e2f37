use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward::forward_inner, ModelWeights, Probe, SoftPrompt, TokenBatch};
use crate::rng::Rng;

/// Per-neuron activation scores `S = Σ_X Σ_i |ReLU(x_i W1 + b1)|` for every
/// FFN layer; `enc[l - 1]` belongs to encoder layer `l`.
///
/// Encoder sums run over the input tokens only (prompt and padding rows are
/// skipped); decoder sums run over the teacher-forced target positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub enc: Vec<Vec<f64>>,
    pub dec: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub prompt_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Scale of the random prompt prepended while profiling.
    pub prompt_std: f32,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { prompt_std: 0.5 }
    }
}

/// Runs the full model, with a freshly drawn random prompt, over every batch
/// and accumulates activation scores. Sums are kept in fixed point so they
/// do not depend on batch order or grouping.
pub fn profile_activations(
    weights: &ModelWeights,
    sample: &[TokenBatch],
    rng: &Rng,
    opts: &ProfileOptions,
) -> Result<ActivationProfile> {
    let cfg = &weights.config;
    let sample_count: usize = sample.iter().map(TokenBatch::len).sum();
    if sample_count == 0 {
        return Err(Error::Empty("profiling sample"));
    }
    let mut prompt_rng = rng.child("profile-prompt");
    let prompt = SoftPrompt::random(cfg, &mut prompt_rng, opts.prompt_std);
    let mut probe = Probe::activations();
    for batch in sample.iter().filter(|b| !b.is_empty()) {
        forward_inner(weights, None, Some(&prompt), batch, Some(&mut probe))?;
    }
    let scale = 2f64.powi(-crate::model::forward::ACTIVATION_FRACTION_BITS);
    let side = |sums: &std::collections::BTreeMap<usize, Vec<i128>>, layers: usize, widths: Vec<usize>| {
        (1..=layers)
            .zip(widths)
            .map(|(l, w)| match sums.get(&l) {
                Some(v) => v.iter().map(|&s| s as f64 * scale).collect(),
                None => vec![0.0; w],
            })
            .collect()
    };
    Ok(ActivationProfile {
        enc: side(
            &probe.enc_activations,
            cfg.enc_layers,
            weights.encoder.iter().map(|l| l.ffn.width()).collect(),
        ),
        dec: side(
            &probe.dec_activations,
            cfg.dec_layers,
            weights.decoder.iter().map(|l| l.ffn.width()).collect(),
        ),
        sample_count,
        prompt_seed: rng.seed(),
    })
}
