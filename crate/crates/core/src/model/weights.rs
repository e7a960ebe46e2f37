use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::partial::PartialSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

const EMBED_STD: f32 = 1.0;
const POS_STD: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[d_model, width]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[width, d_model]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    pub fn width(&self) -> usize {
        self.b1.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: Tensor,
    pub attn: AttnWeights,
    pub ln_ffn: Tensor,
    pub ffn: FfnWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: Tensor,
    pub self_attn: AttnWeights,
    pub ln_cross: Tensor,
    pub cross_attn: AttnWeights,
    pub ln_ffn: Tensor,
    pub ffn: FfnWeights,
}

/// Frozen backbone parameters. The token embedding doubles as the output
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub enc_pos: Tensor,
    pub dec_pos: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_norm: Tensor,
    pub dec_norm: Tensor,
}

/// Standard deviation of a weight matrix with `fan_in` inputs.
pub fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

fn normal(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normal_vec(n, std))
}

fn attn(rng: &mut Rng, d: usize) -> AttnWeights {
    let s = fan_in_std(d);
    AttnWeights {
        wq: normal(rng, &[d, d], s),
        wk: normal(rng, &[d, d], s),
        wv: normal(rng, &[d, d], s),
        wo: normal(rng, &[d, d], s),
    }
}

fn ffn(rng: &mut Rng, d: usize, d_ff: usize) -> FfnWeights {
    FfnWeights {
        w1: normal(rng, &[d, d_ff], fan_in_std(d)),
        b1: Tensor::zeros(&[d_ff]),
        w2: normal(rng, &[d_ff, d], fan_in_std(d_ff)),
        b2: Tensor::zeros(&[d]),
    }
}

/// Scaled-normal initialization: weight matrices use `1/sqrt(fan_in)`, biases
/// start at zero and normalization scales at one.
pub fn init_weights(config: &ModelConfig, rng: &Rng) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let mut r = rng.child("weights");
    let embed = normal(&mut r, &[config.vocab_size, d], EMBED_STD);
    let enc_pos = normal(&mut r, &[config.max_len, d], POS_STD);
    let dec_pos = normal(&mut r, &[config.max_len, d], POS_STD);
    let ones = || Tensor::full(&[d], 1.0);
    let encoder = (0..config.enc_layers)
        .map(|_| EncoderLayer {
            ln_attn: ones(),
            attn: attn(&mut r, d),
            ln_ffn: ones(),
            ffn: ffn(&mut r, d, config.d_ff),
        })
        .collect();
    let decoder = (0..config.dec_layers)
        .map(|_| DecoderLayer {
            ln_self: ones(),
            self_attn: attn(&mut r, d),
            ln_cross: ones(),
            cross_attn: attn(&mut r, d),
            ln_ffn: ones(),
            ffn: ffn(&mut r, d, config.d_ff),
        })
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        embed,
        enc_pos,
        dec_pos,
        encoder,
        decoder,
        enc_norm: ones(),
        dec_norm: ones(),
    })
}

impl ModelWeights {
    /// Every tensor with a stable name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("enc_pos".into(), &self.enc_pos),
            ("dec_pos".into(), &self.dec_pos),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("enc.{}", i + 1);
            out.push((format!("{p}.ln_attn"), &l.ln_attn));
            push_attn(&mut out, &format!("{p}.attn"), &l.attn);
            out.push((format!("{p}.ln_ffn"), &l.ln_ffn));
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        out.push(("enc_norm".into(), &self.enc_norm));
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("dec.{}", i + 1);
            out.push((format!("{p}.ln_self"), &l.ln_self));
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            out.push((format!("{p}.ln_cross"), &l.ln_cross));
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            out.push((format!("{p}.ln_ffn"), &l.ln_ffn));
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        out.push(("dec_norm".into(), &self.dec_norm));
        out
    }

    /// Mutable access in the same order as [`ModelWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.enc_pos, &mut self.dec_pos];
        for l in &mut self.encoder {
            out.push(&mut l.ln_attn);
            out.extend(attn_mut(&mut l.attn));
            out.push(&mut l.ln_ffn);
            out.extend(ffn_mut(&mut l.ffn));
        }
        out.push(&mut self.enc_norm);
        for l in &mut self.decoder {
            out.push(&mut l.ln_self);
            out.extend(attn_mut(&mut l.self_attn));
            out.push(&mut l.ln_cross);
            out.extend(attn_mut(&mut l.cross_attn));
            out.push(&mut l.ln_ffn);
            out.extend(ffn_mut(&mut l.ffn));
        }
        out.push(&mut self.dec_norm);
        out
    }

    /// Rebuilds weights from named tensors (as read from a checkpoint).
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut skeleton = init_weights(config, &crate::rng::seeded_rng(0, "skeleton"))?;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let names: Vec<String> = skeleton.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(skeleton.tensors_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(skeleton)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A physically smaller model holding only the layers and FFN neurons that
    /// `spec` keeps. Layer widths may then differ from `config.d_ff`.
    pub fn extract(&self, spec: &PartialSpec) -> Result<ModelWeights> {
        spec.validate(&self.config)?;
        let shrink = |f: &FfnWeights, keep: &[usize]| -> FfnWeights {
            let d = f.w1.shape()[0];
            let w = f.width();
            let mut w1 = Vec::with_capacity(d * keep.len());
            for r in 0..d {
                let row = &f.w1.data()[r * w..(r + 1) * w];
                w1.extend(keep.iter().map(|&j| row[j]));
            }
            let b1 = keep.iter().map(|&j| f.b1.data()[j]).collect();
            let mut w2 = Vec::with_capacity(keep.len() * d);
            for &j in keep {
                w2.extend_from_slice(f.w2.row(j));
            }
            FfnWeights {
                w1: Tensor::from_parts(vec![d, keep.len()], w1),
                b1: Tensor::vector(b1),
                w2: Tensor::from_parts(vec![keep.len(), d], w2),
                b2: f.b2.clone(),
            }
        };
        let encoder = spec
            .enc_layers
            .iter()
            .zip(&spec.enc_masks)
            .map(|(&i, m)| {
                let src = &self.encoder[i - 1];
                EncoderLayer {
                    ffn: shrink(&src.ffn, &m.active_indices()),
                    ..src.clone()
                }
            })
            .collect::<Vec<_>>();
        let decoder = spec
            .dec_layers
            .iter()
            .zip(&spec.dec_masks)
            .map(|(&i, m)| {
                let src = &self.decoder[i - 1];
                DecoderLayer {
                    ffn: shrink(&src.ffn, &m.active_indices()),
                    ..src.clone()
                }
            })
            .collect::<Vec<_>>();
        let mut config = self.config.clone();
        config.enc_layers = encoder.len();
        config.dec_layers = decoder.len();
        Ok(ModelWeights {
            config,
            encoder,
            decoder,
            ..self.clone()
        })
    }
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, a: &'a AttnWeights) {
    out.push((format!("{p}.wq"), &a.wq));
    out.push((format!("{p}.wk"), &a.wk));
    out.push((format!("{p}.wv"), &a.wv));
    out.push((format!("{p}.wo"), &a.wo));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, f: &'a FfnWeights) {
    out.push((format!("{p}.w1"), &f.w1));
    out.push((format!("{p}.b1"), &f.b1));
    out.push((format!("{p}.w2"), &f.w2));
    out.push((format!("{p}.b2"), &f.b2));
}

fn attn_mut(a: &mut AttnWeights) -> [&mut Tensor; 4] {
    [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]
}

fn ffn_mut(f: &mut FfnWeights) -> [&mut Tensor; 4] {
    [&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]
}
