//! First-order optimizers over lists of tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Factored second moments, no momentum, update clipping at RMS 1.
    AdafactorSimplified,
    Adam,
    SgdMomentum,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| crate::Error::InvalidArgument(format!("unknown optimizer {s:?}")))
    }
}

const ADAFACTOR_EPS: f32 = 1e-30;
const ADAFACTOR_DECAY: f64 = 0.8;
const ADAFACTOR_CLIP: f32 = 1.0;
const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;
const MOMENTUM: f32 = 0.9;

#[derive(Clone, Debug)]
enum Slot {
    Fresh,
    Factored { row: Vec<f32>, col: Vec<f32> },
    Unfactored { v: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32> },
    Momentum { buf: Vec<f32> },
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forgets all moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.slots.clear();
    }

    /// One update `p ← p − lr · u(g)` for every pair.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if self.slots.len() != params.len() {
            self.slots = vec![Slot::Fresh; params.len()];
        }
        self.step += 1;
        let t = self.step;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let shape = g.shape().to_vec();
            let g = g.data();
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::AdafactorSimplified => adafactor(p, g, &shape, slot, t, lr),
                OptimizerKind::Adam => adam(p, g, slot, t, lr),
                OptimizerKind::SgdMomentum => {
                    if matches!(slot, Slot::Fresh) {
                        *slot = Slot::Momentum { buf: vec![0.0; g.len()] };
                    }
                    let Slot::Momentum { buf } = slot else { unreachable!() };
                    for ((x, &gi), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                        *b = MOMENTUM * *b + gi;
                        *x -= lr * *b;
                    }
                }
            }
        }
        Ok(())
    }
}

fn adafactor(p: &mut [f32], g: &[f32], shape: &[usize], slot: &mut Slot, t: u64, lr: f32) {
    let beta2 = (1.0 - (t as f64).powf(-ADAFACTOR_DECAY)) as f32;
    let sq: Vec<f32> = g.iter().map(|&x| x * x + ADAFACTOR_EPS).collect();
    let mut u = vec![0f32; g.len()];
    if let [rows, cols] = *shape {
        if matches!(slot, Slot::Fresh) {
            *slot = Slot::Factored {
                row: vec![0.0; rows],
                col: vec![0.0; cols],
            };
        }
        let Slot::Factored { row, col } = slot else { unreachable!() };
        for (r, rv) in row.iter_mut().enumerate() {
            let mean = sq[r * cols..(r + 1) * cols].iter().sum::<f32>() / cols as f32;
            *rv = beta2 * *rv + (1.0 - beta2) * mean;
        }
        for (c, cv) in col.iter_mut().enumerate() {
            let mean = (0..rows).map(|r| sq[r * cols + c]).sum::<f32>() / rows as f32;
            *cv = beta2 * *cv + (1.0 - beta2) * mean;
        }
        let row_mean = row.iter().sum::<f32>() / rows as f32;
        for r in 0..rows {
            for c in 0..cols {
                let v = row[r] * col[c] / row_mean;
                u[r * cols + c] = g[r * cols + c] / v.sqrt();
            }
        }
    } else {
        if matches!(slot, Slot::Fresh) {
            *slot = Slot::Unfactored { v: vec![0.0; g.len()] };
        }
        let Slot::Unfactored { v } = slot else { unreachable!() };
        for ((vi, &s), (ui, &gi)) in v.iter_mut().zip(&sq).zip(u.iter_mut().zip(g)) {
            *vi = beta2 * *vi + (1.0 - beta2) * s;
            *ui = gi / vi.sqrt();
        }
    }
    let rms = (u.iter().map(|x| x * x).sum::<f32>() / u.len() as f32).sqrt();
    let denom = (rms / ADAFACTOR_CLIP).max(1.0);
    for (x, ui) in p.iter_mut().zip(&u) {
        *x -= lr * ui / denom;
    }
}

fn adam(p: &mut [f32], g: &[f32], slot: &mut Slot, t: u64, lr: f32) {
    if matches!(slot, Slot::Fresh) {
        *slot = Slot::Adam {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        };
    }
    let Slot::Adam { m, v } = slot else { unreachable!() };
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((x, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
    }
}
