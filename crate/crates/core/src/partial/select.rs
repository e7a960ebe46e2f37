use serde::{Deserialize, Serialize};

use super::{ActivationProfile, DecoderPolicy, NeuronMask, PartialSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerStrategy {
    /// Evenly spaced layers including the first and last.
    Uniform,
    /// The first `k` layers.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronStrategy {
    /// Keep the neurons with the highest activation score.
    Activation,
    /// Keep a uniformly random subset.
    Random,
}

/// How to shrink the full model into one partial model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialOptions {
    pub depth_fraction: f64,
    pub width_fraction: f64,
    pub layer_strategy: LayerStrategy,
    pub neuron_strategy: NeuronStrategy,
    pub decoder_policy: DecoderPolicy,
}

impl PartialOptions {
    pub fn full() -> Self {
        PartialOptions {
            depth_fraction: 1.0,
            width_fraction: 1.0,
            layer_strategy: LayerStrategy::Uniform,
            neuron_strategy: NeuronStrategy::Activation,
            decoder_policy: DecoderPolicy::Reduce,
        }
    }
}

fn check_k(total: usize, k: usize) -> Result<()> {
    if k < 1 || k > total {
        return Err(Error::InvalidArgument(format!("cannot keep {k} of {total} layers")));
    }
    Ok(())
}

/// `k` evenly spaced 1-based layers: `1 + (i-1)(L-1)/(k-1)` rounded with ties
/// going down.
pub fn select_layers_uniform(total: usize, k: usize) -> Result<Vec<usize>> {
    check_k(total, k)?;
    if k == 1 {
        return Ok(vec![1]);
    }
    let den = k - 1;
    Ok((0..k)
        .map(|i| {
            let num = i * (total - 1);
            let (q, r) = (num / den, num % den);
            1 + q + usize::from(2 * r > den)
        })
        .collect())
}

/// Layers `1..=k`, i.e. the last `L - k` layers are dropped.
pub fn select_layers_last(total: usize, k: usize) -> Result<Vec<usize>> {
    check_k(total, k)?;
    Ok((1..=k).collect())
}

pub fn select_layers(strategy: LayerStrategy, total: usize, k: usize) -> Result<Vec<usize>> {
    match strategy {
        LayerStrategy::Uniform => select_layers_uniform(total, k),
        LayerStrategy::Last => select_layers_last(total, k),
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidArgument(format!("{name} {f} outside (0, 1]")));
    }
    Ok(())
}

/// `round(fraction · total)`, at least 1.
pub fn retained_count(fraction: f64, total: usize) -> Result<usize> {
    check_fraction("depth fraction", fraction)?;
    Ok(((fraction * total as f64).round() as usize).clamp(1, total))
}

/// `⌈fraction · width⌉`, at least 1.
pub fn kept_neurons(fraction: f64, width: usize) -> Result<usize> {
    check_fraction("keep fraction", fraction)?;
    Ok(((fraction * width as f64 - 1e-9).ceil() as usize).clamp(1, width))
}

/// Mask keeping the `keep` highest scores; equal scores prefer the lower index.
pub fn top_scores_mask(scores: &[f64], keep: usize) -> NeuronMask {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    NeuronMask::keeping(scores.len(), order.into_iter().take(keep))
}

pub fn random_mask(width: usize, keep: usize, rng: &mut Rng) -> NeuronMask {
    NeuronMask::keeping(width, rng.sample_indices(width, keep))
}

/// Masks for every encoder and decoder layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMasks {
    pub enc: Vec<NeuronMask>,
    pub dec: Vec<NeuronMask>,
}

/// Keeps `⌈keep_fraction · d_ff⌉` neurons in every profiled layer.
pub fn select_neurons(
    profile: &ActivationProfile,
    keep_fraction: f64,
    strategy: NeuronStrategy,
    rng: &Rng,
) -> Result<LayerMasks> {
    let side = |name: &str, layers: &[Vec<f64>]| -> Result<Vec<NeuronMask>> {
        layers
            .iter()
            .enumerate()
            .map(|(i, scores)| {
                let keep = kept_neurons(keep_fraction, scores.len())?;
                Ok(match strategy {
                    NeuronStrategy::Activation => top_scores_mask(scores, keep),
                    NeuronStrategy::Random => {
                        random_mask(scores.len(), keep, &mut layer_rng(rng, name, i + 1))
                    }
                })
            })
            .collect()
    };
    Ok(LayerMasks {
        enc: side("enc", &profile.enc)?,
        dec: side("dec", &profile.dec)?,
    })
}

fn layer_rng(rng: &Rng, side: &str, layer: usize) -> Rng {
    rng.child(&format!("neurons/{side}/{layer}"))
}

/// Composes layer and neuron selection into one partial model.
///
/// Reducing both depth and width gives the compound reduction. With
/// [`DecoderPolicy::RetainFull`] the decoder stays complete and unmasked.
pub fn make_partial_spec(
    config: &ModelConfig,
    opts: &PartialOptions,
    profile: Option<&ActivationProfile>,
    rng: &Rng,
) -> Result<PartialSpec> {
    config.validate()?;
    let k_enc = retained_count(opts.depth_fraction, config.enc_layers)?;
    let k_dec = retained_count(opts.depth_fraction, config.dec_layers)?;
    let keep = kept_neurons(opts.width_fraction, config.d_ff)?;
    let narrow = keep < config.d_ff;

    let masks = |side: &str, layers: &[usize], scores: Option<&[Vec<f64>]>| -> Result<Vec<NeuronMask>> {
        layers
            .iter()
            .map(|&l| {
                if !narrow {
                    return Ok(NeuronMask::full(config.d_ff));
                }
                match opts.neuron_strategy {
                    NeuronStrategy::Random => Ok(random_mask(config.d_ff, keep, &mut layer_rng(rng, side, l))),
                    NeuronStrategy::Activation => {
                        let s = scores
                            .and_then(|s| s.get(l - 1))
                            .ok_or_else(|| Error::InvalidArgument("activation masking needs a profile".into()))?;
                        if s.len() != config.d_ff {
                            return Err(Error::IncompatibleSpec(format!(
                                "{side} layer {l}: profile has {} scores, d_ff is {}",
                                s.len(),
                                config.d_ff
                            )));
                        }
                        Ok(top_scores_mask(s, keep))
                    }
                }
            })
            .collect()
    };

    let enc_layers = select_layers(opts.layer_strategy, config.enc_layers, k_enc)?;
    let enc_masks = masks("enc", &enc_layers, profile.map(|p| p.enc.as_slice()))?;
    let (dec_layers, dec_masks) = match opts.decoder_policy {
        DecoderPolicy::RetainFull => (
            (1..=config.dec_layers).collect(),
            vec![NeuronMask::full(config.d_ff); config.dec_layers],
        ),
        DecoderPolicy::Reduce => {
            let layers = select_layers(opts.layer_strategy, config.dec_layers, k_dec)?;
            let m = masks("dec", &layers, profile.map(|p| p.dec.as_slice()))?;
            (layers, m)
        }
    };
    let spec = PartialSpec {
        enc_layers,
        dec_layers,
        enc_masks,
        dec_masks,
        decoder_policy: opts.decoder_policy,
    };
    spec.validate(config)?;
    Ok(spec)
}
