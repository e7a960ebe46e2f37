//! Partial models: which layers run and which FFN neurons stay active.

mod profile;
mod select;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub use profile::{profile_activations, ActivationProfile, ProfileOptions};
pub use select::{
    kept_neurons, make_partial_spec, random_mask, retained_count, select_layers, select_layers_last,
    select_layers_uniform, select_neurons, top_scores_mask, LayerMasks, LayerStrategy, NeuronStrategy, PartialOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderPolicy {
    /// Decoder is reduced exactly like the encoder.
    Reduce,
    /// Decoder always runs complete and unmasked.
    RetainFull,
}

macro_rules! kebab_from_str {
    ($($t:ty => $what:literal),* $(,)?) => {$(
        impl std::str::FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::InvalidArgument(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    )*};
}

kebab_from_str!(
    DecoderPolicy => "decoder policy",
    LayerStrategy => "layer strategy",
    NeuronStrategy => "neuron strategy",
);

/// Binary mask over the inner units of one FFN layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeuronMask(Vec<bool>);

impl NeuronMask {
    pub fn full(width: usize) -> Self {
        NeuronMask(vec![true; width])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        NeuronMask(bits)
    }

    /// Mask keeping exactly the given 0-based neurons.
    pub fn keeping(width: usize, keep: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; width];
        for i in keep {
            bits[i] = true;
        }
        NeuronMask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// 0-based indices of active neurons.
    pub fn active_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_weights(&self) -> Arc<Vec<f32>> {
        Arc::new(self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    /// Elementwise `self ≤ other`.
    pub fn is_within(&self, other: &NeuronMask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// A partial model `M_i`: retained layers (1-based, ascending) per stack and
/// one neuron mask per retained layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSpec {
    pub enc_layers: Vec<usize>,
    pub dec_layers: Vec<usize>,
    pub enc_masks: Vec<NeuronMask>,
    pub dec_masks: Vec<NeuronMask>,
    pub decoder_policy: DecoderPolicy,
}

impl PartialSpec {
    /// Every layer, every neuron.
    pub fn identity(config: &ModelConfig) -> Self {
        PartialSpec {
            enc_layers: (1..=config.enc_layers).collect(),
            dec_layers: (1..=config.dec_layers).collect(),
            enc_masks: vec![NeuronMask::full(config.d_ff); config.enc_layers],
            dec_masks: vec![NeuronMask::full(config.d_ff); config.dec_layers],
            decoder_policy: DecoderPolicy::Reduce,
        }
    }

    pub fn is_identity(&self, config: &ModelConfig) -> bool {
        self.enc_layers.len() == config.enc_layers
            && self.dec_layers.len() == config.dec_layers
            && self.enc_masks.iter().chain(&self.dec_masks).all(NeuronMask::is_full)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::IncompatibleSpec(msg));
        for (side, layers, masks, total) in [
            ("encoder", &self.enc_layers, &self.enc_masks, config.enc_layers),
            ("decoder", &self.dec_layers, &self.dec_masks, config.dec_layers),
        ] {
            if layers.is_empty() {
                return bad(format!("{side} retains no layers"));
            }
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{side} layers {layers:?} not strictly increasing"));
            }
            if layers[0] < 1 || *layers.last().unwrap() > total {
                return bad(format!("{side} layers {layers:?} outside 1..={total}"));
            }
            if masks.len() != layers.len() {
                return bad(format!("{side}: {} masks for {} layers", masks.len(), layers.len()));
            }
            for (layer, m) in layers.iter().zip(masks) {
                if m.len() != config.d_ff {
                    return bad(format!("{side} layer {layer}: mask length {} != d_ff {}", m.len(), config.d_ff));
                }
                if m.active() == 0 {
                    return bad(format!("{side} layer {layer}: mask has no active neuron"));
                }
            }
        }
        if self.decoder_policy == DecoderPolicy::RetainFull
            && (self.dec_layers.len() != config.dec_layers || !self.dec_masks.iter().all(NeuronMask::is_full))
        {
            return bad("retain-full decoder policy with a reduced decoder".into());
        }
        Ok(())
    }

    /// Active inner width of each retained encoder layer.
    pub fn enc_widths(&self) -> Vec<usize> {
        self.enc_masks.iter().map(NeuronMask::active).collect()
    }

    pub fn dec_widths(&self) -> Vec<usize> {
        self.dec_masks.iter().map(NeuronMask::active).collect()
    }

    /// Short human label such as `enc 2/4 dec 2/4 ffn 64`.
    pub fn label(&self, config: &ModelConfig) -> String {
        let widths: Vec<usize> = self.enc_widths().into_iter().chain(self.dec_widths()).collect();
        let min = widths.iter().copied().min().unwrap_or(0);
        let max = widths.iter().copied().max().unwrap_or(0);
        let ffn = if min == max { format!("{min}") } else { format!("{min}-{max}") };
        format!(
            "enc {}/{} dec {}/{} ffn {}",
            self.enc_layers.len(),
            config.enc_layers,
            self.dec_layers.len(),
            config.dec_layers,
            ffn
        )
    }
}

/// True iff `a`'s layers are a subset of `b`'s and each shared layer's mask in
/// `a` is elementwise ≤ the one in `b`.
pub fn is_subsumed(a: &PartialSpec, b: &PartialSpec, config: &ModelConfig) -> Result<bool> {
    a.validate(config)?;
    b.validate(config)?;
    let side = |la: &[usize], ma: &[NeuronMask], lb: &[usize], mb: &[NeuronMask]| {
        la.iter().zip(ma).all(|(layer, mask)| match lb.binary_search(layer) {
            Ok(pos) => mask.is_within(&mb[pos]),
            Err(_) => false,
        })
    };
    Ok(side(&a.enc_layers, &a.enc_masks, &b.enc_layers, &b.enc_masks)
        && side(&a.dec_layers, &a.dec_masks, &b.dec_layers, &b.dec_masks))
}

#[cfg(test)]
mod tests;
