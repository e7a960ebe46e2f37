//! Tiny T5-style encoder–decoder with soft-prompt prepending.
//!
//! The encoder sees `[P; X]`: `prompt_len` trainable rows followed by the token
//! embeddings of the input, all carrying learned absolute positions. Layers
//! run pre-norm (scale-only RMS normalization) with residual connections, and
//! the FFN is `ReLU(x·W1 + b1)·W2 + b2` with an optional neuron mask applied
//! after the nonlinearity. Only the layers named by a [`PartialSpec`] run;
//! a skipped layer is a plain residual pass-through.

pub(crate) mod decode;
pub(crate) mod forward;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokens;

pub use decode::{greedy_decode, greedy_decode_batch};
pub use forward::{build_loss, ffn_apply, forward, forward_full, forward_probed, BoundModel, ForwardOutput, Probe};
pub use weights::{init_weights, AttnWeights, DecoderLayer, EncoderLayer, FfnWeights, ModelWeights};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    /// Full FFN inner width.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    /// Positions available to the encoder (prompt included) and the decoder.
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: 4/4 layers, d = 64, d_ff = 128.
    pub fn tiny() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            vocab_size: 32,
            prompt_len: 10,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("layer counts must be >= 1");
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("d_model, d_ff and n_heads must be >= 1");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.prompt_len == 0 {
            return fail("prompt_len must be >= 1");
        }
        if self.vocab_size <= tokens::FIRST_CONTENT as usize {
            return fail("vocab_size leaves no content tokens");
        }
        if self.max_len <= self.prompt_len {
            return fail("max_len must exceed prompt_len");
        }
        Ok(())
    }

    /// Longest input the encoder accepts after the prompt is prepended.
    pub fn max_input_len(&self) -> usize {
        self.max_len - self.prompt_len
    }
}

/// Trainable prompt matrix of shape `(prompt_len, d_model)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    matrix: Tensor,
}

impl SoftPrompt {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let (l, _) = matrix.dims2()?;
        if l == 0 {
            return Err(Error::InvalidArgument("prompt must have at least one row".into()));
        }
        if !matrix.all_finite() {
            return Err(Error::InvalidArgument("prompt has non-finite entries".into()));
        }
        Ok(SoftPrompt { matrix })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        SoftPrompt {
            matrix: Tensor::zeros(&[config.prompt_len, config.d_model]),
        }
    }

    /// Zero-mean normal entries with standard deviation `std`.
    pub fn random(config: &ModelConfig, rng: &mut Rng, std: f32) -> Self {
        let n = config.prompt_len * config.d_model;
        SoftPrompt {
            matrix: Tensor::from_parts(vec![config.prompt_len, config.d_model], rng.normal_vec(n, std)),
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.len() != config.prompt_len || self.width() != config.d_model {
            return Err(Error::Shape {
                op: "prompt",
                detail: format!(
                    "prompt is {}x{}, model expects {}x{}",
                    self.len(),
                    self.width(),
                    config.prompt_len,
                    config.d_model
                ),
            });
        }
        Ok(())
    }
}

/// One input/target pair of content ids (no BOS/EOS).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Batch of sequences ready for the model. Targets carry their EOS; padding is
/// applied when the batch is laid out, so no PAD appears in a sequence body.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    inputs: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let (inputs, targets) = examples
            .into_iter()
            .map(|e| (e.input.clone(), tokens::with_eos(&e.target)))
            .unzip();
        TokenBatch { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<u32>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<u32>] {
        &self.targets
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for seq in self.inputs.iter().chain(&self.targets) {
            if let Some(&id) = seq.iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::ReservedToken {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        for x in &self.inputs {
            if x.is_empty() || x.len() > config.max_input_len() {
                return Err(Error::InvalidArgument(format!(
                    "input length {} outside 1..={}",
                    x.len(),
                    config.max_input_len()
                )));
            }
        }
        for y in &self.targets {
            if y.len() > config.max_len {
                return Err(Error::InvalidArgument(format!(
                    "target length {} exceeds max_len {}",
                    y.len(),
                    config.max_len
                )));
            }
        }
        Ok(())
    }
}
