use std::collections::BTreeMap;
use std::sync::Arc;

use super::{ModelConfig, ModelWeights, SoftPrompt, TokenBatch};
use crate::autodiff::{AttnLayout, Tape, Var};
use crate::error::{shape_err, Result};
use crate::partial::{NeuronMask, PartialSpec};
use crate::tensor::{Element, Tensor};
use crate::tokens::{BOS, PAD};

/// Fixed-point scale for exact, order-independent activation sums.
pub(crate) const ACTIVATION_FRACTION_BITS: i32 = 60;

/// Optional instrumentation of a forward pass.
#[derive(Debug)]
pub struct Probe {
    /// Accumulate `|ReLU(x·W1 + b1)|` per neuron over input-token positions.
    pub collect_activations: bool,
    /// Fixed-point sums keyed by 1-based layer index.
    pub enc_activations: BTreeMap<usize, Vec<i128>>,
    pub dec_activations: BTreeMap<usize, Vec<i128>>,
    /// `(queries, keys)` per sequence for each executed encoder self-attention.
    pub enc_attention: Vec<(usize, usize)>,
    /// Smallest `|x·W1 + b1|` seen in any executed FFN, over all rows.
    pub min_abs_preactivation: f64,
}

impl Default for Probe {
    fn default() -> Self {
        Probe {
            collect_activations: false,
            enc_activations: BTreeMap::new(),
            dec_activations: BTreeMap::new(),
            enc_attention: Vec::new(),
            min_abs_preactivation: f64::INFINITY,
        }
    }
}

impl Probe {
    pub fn activations() -> Self {
        Probe {
            collect_activations: true,
            ..Probe::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundAttn {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundFfn {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundEnc {
    ln_attn: Var,
    attn: BoundAttn,
    ln_ffn: Var,
    ffn: BoundFfn,
}

#[derive(Clone, Copy, Debug)]
struct BoundDec {
    ln_self: Var,
    self_attn: BoundAttn,
    ln_cross: Var,
    cross_attn: BoundAttn,
    ln_ffn: Var,
    ffn: BoundFfn,
}

/// Model weights registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    /// Every weight var, in [`ModelWeights::named`] order.
    pub vars: Vec<Var>,
    embed: Var,
    enc_pos: Var,
    dec_pos: Var,
    encoder: Vec<BoundEnc>,
    decoder: Vec<BoundDec>,
    enc_norm: Var,
    dec_norm: Var,
}

impl BoundModel {
    /// Registers all weights; as params when `trainable`, else as constants.
    pub fn bind<T: Element>(tape: &mut Tape<T>, weights: &ModelWeights, trainable: bool) -> Self {
        let vars: Vec<Var> = weights
            .named()
            .into_iter()
            .map(|(name, t)| {
                let t = T::adopt(t);
                if trainable {
                    tape.param_named(name, t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("weight var count");
        let attn = |next: &mut dyn FnMut() -> Var| BoundAttn {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        };
        let ffn = |next: &mut dyn FnMut() -> Var| BoundFfn {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let embed = next();
        let enc_pos = next();
        let dec_pos = next();
        let encoder = (0..weights.encoder.len())
            .map(|_| BoundEnc {
                ln_attn: next(),
                attn: attn(&mut next),
                ln_ffn: next(),
                ffn: ffn(&mut next),
            })
            .collect();
        let enc_norm = next();
        let decoder = (0..weights.decoder.len())
            .map(|_| BoundDec {
                ln_self: next(),
                self_attn: attn(&mut next),
                ln_cross: next(),
                cross_attn: attn(&mut next),
                ln_ffn: next(),
                ffn: ffn(&mut next),
            })
            .collect();
        let dec_norm = next();
        BoundModel {
            config: weights.config.clone(),
            vars,
            embed,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The token embedding table, also used as the output projection.
    pub fn embedding(&self) -> Var {
        self.embed
    }
}

/// Layers to run on one side: `(0-based layer index, optional neuron mask)`.
type Plan<T> = Vec<(usize, Option<Arc<Vec<T>>>)>;

fn mask_weights<T: Element>(m: &NeuronMask) -> Arc<Vec<T>> {
    Arc::new(m.bits().iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
}

fn plans<T: Element>(config: &ModelConfig, spec: Option<&PartialSpec>) -> Result<(Plan<T>, Plan<T>)> {
    match spec {
        None => Ok((
            (0..config.enc_layers).map(|i| (i, None)).collect(),
            (0..config.dec_layers).map(|i| (i, None)).collect(),
        )),
        Some(s) => {
            s.validate(config)?;
            let side = |layers: &[usize], masks: &[NeuronMask]| -> Plan<T> {
                layers
                    .iter()
                    .zip(masks)
                    .map(|(&l, m)| (l - 1, Some(mask_weights(m))))
                    .collect()
            };
            Ok((side(&s.enc_layers, &s.enc_masks), side(&s.dec_layers, &s.dec_masks)))
        }
    }
}

fn self_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    a: &BoundAttn,
    layout: AttnLayout,
    valid: &[bool],
) -> Result<Var> {
    let q = tape.matmul(x, a.wq)?;
    let k = tape.matmul(x, a.wk)?;
    let v = tape.matmul(x, a.wv)?;
    let o = tape.attention(q, k, v, layout, valid)?;
    tape.matmul(o, a.wo)
}

fn cross_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    memory: Var,
    a: &BoundAttn,
    layout: AttnLayout,
    valid: &[bool],
) -> Result<Var> {
    let q = tape.matmul(x, a.wq)?;
    let k = tape.matmul(memory, a.wk)?;
    let v = tape.matmul(memory, a.wv)?;
    let o = tape.attention(q, k, v, layout, valid)?;
    tape.matmul(o, a.wo)
}

struct FfnObserver<'a> {
    margin: &'a mut f64,
    /// Score accumulator and the rows that count toward it.
    scores: Option<(&'a mut Vec<i128>, &'a [bool])>,
}

/// `ReLU(x·W1 + b1) ∘ mask · W2 + b2`. An observer sees the pre-activations
/// and, when asked, adds `|ReLU(·)|` of the counted rows into its scores.
fn ffn<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    f: &BoundFfn,
    mask: Option<&Arc<Vec<T>>>,
    obs: Option<FfnObserver<'_>>,
) -> Result<Var> {
    let h = tape.matmul(x, f.w1)?;
    let h = tape.add_row(h, f.b1)?;
    let mut scores = None;
    if let Some(o) = obs {
        let m = tape.value(h).data().iter().map(|v| v.abs().as_f64()).fold(f64::INFINITY, f64::min);
        *o.margin = o.margin.min(m);
        scores = o.scores;
    }
    let h = tape.relu(h)?;
    if let Some((acc, counted)) = scores {
        let width = tape.value(f.b1).numel();
        if acc.is_empty() {
            acc.resize(width, 0);
        }
        let hv = tape.value(h).data();
        for (row, &keep) in hv.chunks(width).zip(counted) {
            if keep {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += to_fixed(v.abs());
                }
            }
        }
    }
    let h = match mask {
        Some(m) => tape.mul_mask(h, m.clone())?,
        None => h,
    };
    let o = tape.matmul(h, f.w2)?;
    tape.add_row(o, f.b2)
}

fn to_fixed<T: Element>(v: T) -> i128 {
    (v.as_f64() * 2f64.powi(ACTIVATION_FRACTION_BITS)) as i128
}

/// Encoder states plus the geometry the decoder needs.
pub(crate) struct Encoded {
    pub out: Var,
    pub valid: Vec<bool>,
    pub len: usize,
}

pub(crate) fn encode<T: Element>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    spec: Option<&PartialSpec>,
    prompt: Option<Var>,
    inputs: &[Vec<u32>],
    mut probe: Option<&mut Probe>,
) -> Result<Encoded> {
    let cfg = &model.config;
    let batch = inputs.len();
    let n = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let l = match prompt {
        Some(p) => tape.value(p).dims2()?.0,
        None => 0,
    };
    let s = l + n;
    if s > cfg.max_len {
        return Err(shape_err("encode", format!("{l} prompt + {n} input positions exceed max_len {}", cfg.max_len)));
    }
    let mut ids = Vec::with_capacity(batch * n);
    let mut valid = Vec::with_capacity(batch * s);
    let mut counted = Vec::with_capacity(batch * s);
    for x in inputs {
        ids.extend(x.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(PAD as usize, n - x.len()));
        valid.extend(std::iter::repeat_n(true, l));
        counted.extend(std::iter::repeat_n(false, l));
        for i in 0..n {
            valid.push(i < x.len());
            counted.push(i < x.len());
        }
    }
    let tok = tape.gather(model.embed, ids)?;
    let x = match prompt {
        Some(p) => tape.prepend_rows(p, tok, batch)?,
        None => tok,
    };
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
    let pos = tape.gather(model.enc_pos, pos_ids)?;
    let mut x = tape.add(x, pos)?;

    let (enc_plan, _) = plans::<T>(cfg, spec)?;
    let layout = AttnLayout {
        batch,
        q_len: s,
        k_len: s,
        heads: cfg.n_heads,
        causal: false,
    };
    for (i, mask) in &enc_plan {
        let layer = &model.encoder[*i];
        let h = tape.rms_norm(x, layer.ln_attn)?;
        let a = self_attention(tape, h, &layer.attn, layout.clone(), &valid)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, layer.ln_ffn)?;
        let obs = probe.as_deref_mut().map(|p| {
            p.enc_attention.push((s, s));
            FfnObserver {
                margin: &mut p.min_abs_preactivation,
                scores: p
                    .collect_activations
                    .then(|| (p.enc_activations.entry(i + 1).or_default(), counted.as_slice())),
            }
        });
        let f = ffn(tape, h, &layer.ffn, mask.as_ref(), obs)?;
        x = tape.add(x, f)?;
    }
    let out = tape.rms_norm(x, model.enc_norm)?;
    Ok(Encoded { out, valid, len: s })
}

/// Decoder logits `[batch * t, vocab]` for equal-length decoder inputs.
pub(crate) fn decode_logits<T: Element>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    spec: Option<&PartialSpec>,
    enc: &Encoded,
    dec_inputs: &[Vec<u32>],
    mut probe: Option<&mut Probe>,
) -> Result<Var> {
    let cfg = &model.config;
    let batch = dec_inputs.len();
    let t = dec_inputs.first().map_or(0, Vec::len);
    if t == 0 || t > cfg.max_len || dec_inputs.iter().any(|d| d.len() != t) {
        return Err(shape_err("decode", format!("decoder inputs must share a length in 1..={}", cfg.max_len)));
    }
    let ids: Vec<usize> = dec_inputs.iter().flatten().map(|&i| i as usize).collect();
    let counted: Vec<bool> = dec_inputs.iter().flatten().map(|&i| i != PAD).collect();
    let tok = tape.gather(model.embed, ids)?;
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
    let pos = tape.gather(model.dec_pos, pos_ids)?;
    let mut x = tape.add(tok, pos)?;

    let (_, dec_plan) = plans::<T>(cfg, spec)?;
    let self_layout = AttnLayout {
        batch,
        q_len: t,
        k_len: t,
        heads: cfg.n_heads,
        causal: true,
    };
    let cross_layout = AttnLayout {
        batch,
        q_len: t,
        k_len: enc.len,
        heads: cfg.n_heads,
        causal: false,
    };
    let all_valid = vec![true; batch * t];
    for (i, mask) in &dec_plan {
        let layer = &model.decoder[*i];
        let h = tape.rms_norm(x, layer.ln_self)?;
        let a = self_attention(tape, h, &layer.self_attn, self_layout.clone(), &all_valid)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, layer.ln_cross)?;
        let a = cross_attention(tape, h, enc.out, &layer.cross_attn, cross_layout.clone(), &enc.valid)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, layer.ln_ffn)?;
        let obs = probe.as_deref_mut().map(|p| FfnObserver {
            margin: &mut p.min_abs_preactivation,
            scores: p
                .collect_activations
                .then(|| (p.dec_activations.entry(i + 1).or_default(), counted.as_slice())),
        });
        let f = ffn(tape, h, &layer.ffn, mask.as_ref(), obs)?;
        x = tape.add(x, f)?;
    }
    let h = tape.rms_norm(x, model.dec_norm)?;
    let h = tape.scale(h, T::one() / T::of_f64(cfg.d_model as f64).sqrt())?;
    tape.matmul_t(h, model.embed)
}

/// Teacher-forced decoder inputs (`BOS` + shifted target) and per-position
/// targets, both padded to the longest target.
pub(crate) fn teacher_forcing(targets: &[Vec<u32>]) -> (Vec<Vec<u32>>, Vec<Option<usize>>) {
    let t = targets.iter().map(Vec::len).max().unwrap_or(0);
    let mut dec_in = Vec::with_capacity(targets.len());
    let mut gold = Vec::with_capacity(targets.len() * t);
    for y in targets {
        let mut d = Vec::with_capacity(t);
        d.push(BOS);
        d.extend_from_slice(&y[..y.len().saturating_sub(1)]);
        d.resize(t, PAD);
        dec_in.push(d);
        gold.extend(y.iter().map(|&id| Some(id as usize)));
        gold.extend(std::iter::repeat_n(None, t - y.len()));
    }
    (dec_in, gold)
}

/// Records the teacher-forced loss graph; returns `(loss, logits)`.
pub fn build_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    spec: Option<&PartialSpec>,
    prompt: Option<Var>,
    batch: &TokenBatch,
    mut probe: Option<&mut Probe>,
) -> Result<(Var, Var)> {
    batch.validate(&model.config)?;
    let enc = encode(tape, model, spec, prompt, batch.inputs(), probe.as_deref_mut())?;
    let (dec_in, gold) = teacher_forcing(batch.targets());
    let logits = decode_logits(tape, model, spec, &enc, &dec_in, probe)?;
    let loss = tape.cross_entropy(logits, gold)?;
    Ok((loss, logits))
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Mean cross-entropy over non-pad target tokens.
    pub loss: f32,
    /// `[batch * max_target_len, vocab]`
    pub logits: Tensor,
}

/// Teacher-forced forward pass of the partial model `spec` with the prompt
/// prepended to every input.
pub fn forward(
    weights: &ModelWeights,
    spec: &PartialSpec,
    prompt: Option<&SoftPrompt>,
    batch: &TokenBatch,
) -> Result<ForwardOutput> {
    forward_inner(weights, Some(spec), prompt, batch, None)
}

/// Forward pass through every layer with no neuron masking at all.
pub fn forward_full(weights: &ModelWeights, prompt: Option<&SoftPrompt>, batch: &TokenBatch) -> Result<ForwardOutput> {
    forward_inner(weights, None, prompt, batch, None)
}

/// Full forward pass that also fills `probe`.
pub fn forward_probed(
    weights: &ModelWeights,
    prompt: Option<&SoftPrompt>,
    batch: &TokenBatch,
    probe: &mut Probe,
) -> Result<ForwardOutput> {
    forward_inner(weights, None, prompt, batch, Some(probe))
}

pub(crate) fn forward_inner(
    weights: &ModelWeights,
    spec: Option<&PartialSpec>,
    prompt: Option<&SoftPrompt>,
    batch: &TokenBatch,
    probe: Option<&mut Probe>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, weights, false);
    let p = match prompt {
        Some(p) => {
            p.check(&weights.config)?;
            Some(tape.constant(p.matrix().clone()))
        }
        None => None,
    };
    let (loss, logits) = build_loss(&mut tape, &model, spec, p, batch, probe)?;
    Ok(ForwardOutput {
        loss: tape.value(loss).item(),
        logits: tape.value(logits).clone(),
    })
}

/// One FFN block on a single vector: `ReLU(x·W1 + b1) ∘ mask · W2 + b2`.
pub fn ffn_apply(
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    mask: &NeuronMask,
    x: &[f32],
) -> Result<Vec<f32>> {
    let (d, width) = w1.dims2()?;
    if x.len() != d || b1.shape() != [width] || w2.shape() != [width, d] || b2.shape() != [d] || mask.len() != width {
        return Err(shape_err(
            "ffn_apply",
            format!(
                "x {} W1 {:?} b1 {:?} W2 {:?} b2 {:?} mask {}",
                x.len(),
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape(),
                mask.len()
            ),
        ));
    }
    let mut tape = Tape::new();
    let f = BoundFfn {
        w1: tape.constant(w1.clone()),
        b1: tape.constant(b1.clone()),
        w2: tape.constant(w2.clone()),
        b2: tape.constant(b2.clone()),
    };
    let xv = tape.constant(Tensor::from_parts(vec![1, d], x.to_vec()));
    let out = ffn(&mut tape, xv, &f, Some(&mask.as_weights()), None)?;
    Ok(tape.value(out).data().to_vec())
}
