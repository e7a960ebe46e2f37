//! Tape-based reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Operations are recorded in execution order on a [`Tape`]; every record's
//! parents therefore precede it, and [`Tape::backward`] visits the records once
//! in reverse. Only nodes that depend on a `param` leaf get gradient storage,
//! so a frozen backbone costs no weight-gradient work.
//!
//! ```
//! use fastpt::autodiff::Tape;
//! use fastpt::Tensor;
//!
//! let mut tape = Tape::new();
//! let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.grad(loss, &[p]).unwrap();
//! assert_eq!(grads[0].data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use gradcheck::finite_diff_grad;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};
use kernels::{dot, gemm_nn, gemm_nt, gemm_tn, softmax_row};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const RMS_EPS: f64 = 1e-6;

/// Handle to a recorded value. Only meaningful on the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    Scale { a: usize, s: T },
    Relu(usize),
    MulMask { a: usize, mask: Arc<Vec<T>> },
    Softmax(usize),
    RmsNorm { a: usize, scale: usize, inv_rms: Vec<T> },
    Gather { table: usize, ids: Vec<usize> },
    PrependRows { prefix: usize, rows: usize, batch: usize },
    Attention { q: usize, k: usize, v: usize, layout: AttnLayout, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(usize),
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::empty()
    }
}

impl Tape<f32> {
    pub fn new() -> Self {
        Self::empty()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return None;
        }
        let shape = self.shapes[v.index].clone();
        Some(match &self.grads[v.index] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// True if backward produced storage for `v` (i.e. it required a gradient
    /// and lies on a path to the loss).
    pub fn has(&self, v: Var) -> bool {
        v.tape == self.tape && self.grads.get(v.index).is_some_and(|g| g.is_some())
    }
}

impl<T: Element> Tape<T> {
    /// Empty tape for any element type; `Tape::new()` is the `f32` shorthand.
    pub fn empty() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("value() on foreign var");
        &self.nodes[v.index].value
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    pub fn param_named(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        self.leaf(t, true, Some(name.into()))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            name,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape(format!("#{} (tape {})", v.index, v.tape)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            panic!("non-finite value produced by {op:?}");
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[i]
            .value
            .dims2()
            .map_err(|_| shape_err(op, format!("operand has shape {:?}", self.nodes[i].value.shape())))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ia, "matmul")?;
        let (br, bc) = self.dims2(ib, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{br},{bc}] (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        if trans_b {
            gemm_nt(av, bv, &mut out, m, k, n);
        } else {
            gemm_nn(av, bv, &mut out, m, k, n);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: ia, b: ib, trans_b },
            &[ia, ib],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn same_shape(&self, ia: usize, ib: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "add")?;
        let out: Vec<T> = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "mul")?;
        let out: Vec<T> = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(ia, ib), &[ia, ib]))
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (m, n) = self.dims2(ia, "add_row")?;
        if self.nodes[ib].value.shape() != [n] {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for [{m},{n}]", self.nodes[ib].value.shape()),
            ));
        }
        let bv = self.nodes[ib].value.data();
        let mut out = self.nodes[ia].value.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::AddRow { a: ia, bias: ib },
            &[ia, ib],
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out: Vec<T> = self.nodes[ia].value.data().iter().map(|&x| x * s).collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale { a: ia, s }, &[ia]))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out: Vec<T> = self.nodes[ia]
            .value
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Relu(ia), &[ia]))
    }

    /// Multiplies every row of `a[m,n]` by a constant column mask of length `n`.
    pub fn mul_mask(&mut self, a: Var, mask: Arc<Vec<T>>) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.dims2(ia, "mul_mask")?;
        if mask.len() != n {
            return Err(shape_err("mul_mask", format!("mask length {} for width {n}", mask.len())));
        }
        let mut out = self.nodes[ia].value.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, &w) in row.iter_mut().zip(mask.iter()) {
                *x *= w;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MulMask { a: ia, mask },
            &[ia],
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = self.nodes[ia].value.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(ia), &[ia]))
    }

    /// T5-style layer normalization: `x / rms(x) * scale`, no centering or bias.
    pub fn rms_norm(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(scale)?);
        let (m, n) = self.dims2(ia, "rms_norm")?;
        if self.nodes[is].value.shape() != [n] {
            return Err(shape_err("rms_norm", format!("scale {:?} for width {n}", self.nodes[is].value.shape())));
        }
        let sv = self.nodes[is].value.data();
        let xv = self.nodes[ia].value.data();
        let mut out = vec![T::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        let width = T::of_f64(n as f64);
        for r in 0..m {
            let x = &xv[r * n..(r + 1) * n];
            let ms = dot(x, x) / width;
            let inv = T::one() / (ms + T::of_f64(RMS_EPS)).sqrt();
            inv_rms.push(inv);
            for ((o, &xi), &si) in out[r * n..(r + 1) * n].iter_mut().zip(x).zip(sv) {
                *o = xi * inv * si;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::RmsNorm { a: ia, scale: is, inv_rms },
            &[ia, is],
        ))
    }

    /// Rows of `table[V,d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let it = self.check(table)?;
        let (v, d) = self.dims2(it, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather", format!("id {bad} out of range for table of {v} rows")));
        }
        let tv = self.nodes[it].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rows = ids.len();
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Gather { table: it, ids },
            &[it],
        ))
    }

    /// Builds `[prefix; rows_b]` for each of `batch` equal blocks of `rows`.
    ///
    /// `prefix` is `[l, d]`, `rows` is `[batch * n, d]`; the result is
    /// `[batch * (l + n), d]` with the prefix repeated ahead of every block.
    pub fn prepend_rows(&mut self, prefix: Var, rows: Var, batch: usize) -> Result<Var> {
        let (ip, ir) = (self.check(prefix)?, self.check(rows)?);
        let (l, d) = self.dims2(ip, "prepend_rows")?;
        let (total, d2) = self.dims2(ir, "prepend_rows")?;
        if d != d2 || batch == 0 || total % batch != 0 {
            return Err(shape_err(
                "prepend_rows",
                format!("prefix [{l},{d}], rows [{total},{d2}], batch {batch}"),
            ));
        }
        let n = total / batch;
        let pv = self.nodes[ip].value.data();
        let rv = self.nodes[ir].value.data();
        let mut out = Vec::with_capacity(batch * (l + n) * d);
        for b in 0..batch {
            out.extend_from_slice(pv);
            out.extend_from_slice(&rv[b * n * d..(b + 1) * n * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch * (l + n), d], out),
            Op::PrependRows { prefix: ip, rows: ir, batch },
            &[ip, ir],
        ))
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `key_valid[b * k_len + j]` false hides key `j` of sequence `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (qr, d) = self.dims2(iq, "attention")?;
        let (kr, dk) = self.dims2(ik, "attention")?;
        let (vr, dv) = self.dims2(iv, "attention")?;
        let AttnLayout { batch, q_len, k_len, heads, causal } = layout;
        if qr != batch * q_len
            || kr != batch * k_len
            || vr != kr
            || dk != d
            || dv != d
            || heads == 0
            || d % heads != 0
            || key_valid.len() != batch * k_len
        {
            return Err(shape_err(
                "attention",
                format!("q [{qr},{d}] k [{kr},{dk}] v [{vr},{dv}] layout {layout:?} mask {}", key_valid.len()),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
        );
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); qr * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qv[(b * q_len + i) * d + off..(b * q_len + i) * d + off + dh];
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = if !key_valid[b * k_len + j] || (causal && j > i) {
                            T::neg_infinity()
                        } else {
                            let krow = &kv[(b * k_len + j) * d + off..(b * k_len + j) * d + off + dh];
                            dot(qrow, krow) * scale
                        };
                    }
                    softmax_row(p);
                    let orow = &mut out[(b * q_len + i) * d + off..(b * q_len + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == T::zero() {
                            continue;
                        }
                        let vrow = &vv[(b * k_len + j) * d + off..(b * k_len + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![qr, d], out),
            Op::Attention { q: iq, k: ik, v: iv, layout, probs },
            &[iq, ik, iv],
        ))
    }

    /// Mean token cross-entropy of `logits[N,V]`; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let il = self.check(logits)?;
        let (n, v) = self.dims2(il, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(shape_err("cross_entropy", format!("target {bad} >= vocab {v}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("target set"));
        }
        let mut probs = self.nodes[il].value.data().to_vec();
        let mut total = 0.0f64;
        for (row, t) in probs.chunks_mut(v).zip(&targets) {
            let Some(t) = *t else { continue };
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += (lse - row[t]).as_f64();
            softmax_row(row);
        }
        let loss = T::of_f64(total / count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: il, targets, probs, count },
            &[il],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.check(a).expect("sum() on foreign var");
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        let loss_value = &self.nodes[il].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        if self.nodes[il].requires_grad {
            grads[il] = Some(vec![T::one()]);
        }
        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes[..=il].iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.truncate(il + 1);
        // Only leaves keep their gradients; drop anything else left behind.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes,
            grads,
        })
    }

    /// `d loss / d param` for each param, in order. Params that do not reach
    /// the loss get zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        for &p in params {
            if p.tape != self.id || p.index >= self.nodes.len() {
                return Err(Error::NotOnTape(format!("#{}", p.index)));
            }
        }
        let il = self.check(loss)?;
        let grads = self.backward(loss)?;
        params
            .iter()
            .map(|&p| {
                if p.index > il {
                    // Recorded after the loss, so it cannot influence it.
                    return Ok(Tensor::zeros(self.nodes[p.index].value.shape()));
                }
                if !self.nodes[p.index].requires_grad {
                    let name = self.nodes[p.index].name.clone().unwrap_or_else(|| format!("#{}", p.index));
                    return Err(Error::NotOnTape(format!("{name} (recorded as a constant)")));
                }
                Ok(grads.get(p).expect("checked above"))
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($i:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $i) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                let (m, k) = nodes[*a].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if *trans_b {
                    // C = A Bᵀ, B is [n, k]
                    with_grad!(*a, |ga| { gemm_nn(g, bv, ga, m, n, k); });
                    with_grad!(*b, |gb| { gemm_tn(g, av, gb, m, n, k); });
                } else {
                    with_grad!(*a, |ga| { gemm_nt(g, bv, ga, m, n, k); });
                    with_grad!(*b, |gb| { gemm_tn(av, g, gb, m, k, n); });
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y); });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y); });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                with_grad!(*a, |ga| {
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow { a, bias } => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y); });
                let n = nodes[*bias].value.numel();
                with_grad!(*bias, |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Scale { a, s } => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s); });
            }
            Op::Relu(a) => {
                let av = nodes[*a].value.data();
                with_grad!(*a, |ga| {
                    for ((x, &gy), &xa) in ga.iter_mut().zip(g).zip(av) {
                        if xa > T::zero() {
                            *x += gy;
                        }
                    }
                });
            }
            Op::MulMask { a, mask } => {
                let n = mask.len();
                with_grad!(*a, |ga| {
                    for (grow, gyrow) in ga.chunks_mut(n).zip(g.chunks(n)) {
                        for ((x, &gy), &w) in grow.iter_mut().zip(gyrow).zip(mask.iter()) {
                            *x += gy * w;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                with_grad!(*a, |ga| {
                    for ((grow, gyrow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(gyrow, yrow);
                        for ((x, &gy), &yy) in grow.iter_mut().zip(gyrow).zip(yrow) {
                            *x += yy * (gy - s);
                        }
                    }
                });
            }
            Op::RmsNorm { a, scale, inv_rms } => {
                let xv = nodes[*a].value.data();
                let sv = nodes[*scale].value.data();
                let n = sv.len();
                with_grad!(*a, |ga| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let x = &xv[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        // dx = inv·(g∘s) − x·inv³/n·Σ(g∘s∘x)
                        let mut gsx = T::zero();
                        for j in 0..n {
                            gsx += gy[j] * sv[j] * x[j];
                        }
                        let c = inv * inv * inv * gsx / T::of_f64(n as f64);
                        for (j, out) in ga[r * n..(r + 1) * n].iter_mut().enumerate() {
                            *out += inv * gy[j] * sv[j] - x[j] * c;
                        }
                    }
                });
                with_grad!(*scale, |gs| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let x = &xv[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        for j in 0..n {
                            gs[j] += gy[j] * x[j] * inv;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::PrependRows { prefix, rows, batch } => {
                let pn = nodes[*prefix].value.numel();
                let rn = nodes[*rows].value.numel() / batch;
                let block = pn + rn;
                with_grad!(*prefix, |gp| {
                    for b in 0..*batch {
                        let src = &g[b * block..b * block + pn];
                        gp.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
                with_grad!(*rows, |gr| {
                    for b in 0..*batch {
                        let src = &g[b * block + pn..(b + 1) * block];
                        gr[b * rn..(b + 1) * rn].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(node, g, *q, *k, *v, layout, probs, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = nodes[*logits].value.shape()[1];
                let w = g[0] / T::of_f64(*count as f64);
                with_grad!(*logits, |gl| {
                    for ((grow, prow), t) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        let Some(t) = *t else { continue };
                        for (x, &p) in grow.iter_mut().zip(prow) {
                            *x += w * p;
                        }
                        grow[t] -= w;
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]); });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        g: &[T],
        iq: usize,
        ik: usize,
        iv: usize,
        layout: &AttnLayout,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let d = node.value.shape()[1];
        let AttnLayout { batch, q_len, k_len, heads, .. } = *layout;
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (nodes[iq].value.data(), nodes[ik].value.data(), nodes[iv].value.data());
        let need = |i: usize| nodes[i].requires_grad;
        let mut dq = need(iq).then(|| vec![T::zero(); qv.len()]);
        let mut dk = need(ik).then(|| vec![T::zero(); kv.len()]);
        let mut dv = need(iv).then(|| vec![T::zero(); vv.len()]);
        let mut ds = vec![T::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qi = (b * q_len + i) * d + off;
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &g[qi..qi + dh];
                    // dP_j = dO · V_j ; dS = P ∘ (dP − Σ P∘dP)
                    let mut s = T::zero();
                    for (j, dsj) in ds.iter_mut().enumerate() {
                        if p[j] == T::zero() {
                            *dsj = T::zero();
                            continue;
                        }
                        let vj = (b * k_len + j) * d + off;
                        let dp = dot(go, &vv[vj..vj + dh]);
                        *dsj = dp;
                        s += p[j] * dp;
                    }
                    for (j, dsj) in ds.iter_mut().enumerate() {
                        *dsj = p[j] * (*dsj - s) * scale;
                    }
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let kj = (b * k_len + j) * d + off;
                        if let Some(dv) = dv.as_mut() {
                            for (x, &y) in dv[kj..kj + dh].iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            for (x, &y) in dq[qi..qi + dh].iter_mut().zip(&kv[kj..kj + dh]) {
                                *x += ds[j] * y;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for (x, &y) in dk[kj..kj + dh].iter_mut().zip(&qv[qi..qi + dh]) {
                                *x += ds[j] * y;
                            }
                        }
                    }
                }
            }
        }
        for (i, local) in [(iq, dq), (ik, dk), (iv, dv)] {
            if let Some(local) = local {
                let slot = grads[i].get_or_insert_with(|| vec![T::zero(); local.len()]);
                slot.iter_mut().zip(&local).for_each(|(x, &y)| *x += y);
            }
        }
    }
}

/// Lazily allocated gradient buffer for node `i`, or `None` if it needs no gradient.
fn grad_slot<'g, T: Element>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut [T]> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()]))
}

#[cfg(test)]
mod tests;

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor turns the measure into an absolute error for entries much smaller
/// than it, where `f32` cancellation makes a pure relative error meaningless.
pub fn max_relative_error<T: Element>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing tensors of different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
