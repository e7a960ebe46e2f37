use super::*;
use crate::rng::{seeded_rng, Rng};

fn rand_tensor(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normal_vec(n, std))
}

/// Weighted sum `Σ w ∘ out` so every output element carries gradient.
fn project<T: Element>(tape: &mut Tape<T>, out: Var, w: &Tensor) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(w.cast());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst elementwise relative error between the f32 autodiff gradient of
/// `Σ w ∘ build(inputs)` and an f64 central-difference oracle of the same
/// function.
fn compare<F32, F64>(seed: u64, inputs: Vec<Tensor>, build32: F32, build64: F64) -> f64
where
    F32: Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build32(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let w = rand_tensor(&mut seeded_rng(seed, "weighting"), &shape, 1.0);
    let loss = project(&mut tape, out, &w).unwrap();
    let analytic = tape.grad(loss, &vars).unwrap();

    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = finite_diff_grad(
        |ps: &[Tensor<f64>]| {
            let mut t = Tape::<f64>::empty();
            let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            let out = build64(&mut t, &vs)?;
            let loss = project(&mut t, out, &w)?;
            Ok(t.value(loss).item())
        },
        &inputs64,
        1e-3,
    )
    .unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(&a.cast::<f64>(), n, 1e-2))
        .fold(0.0, f64::max)
}

macro_rules! check {
    ($seed:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
        compare(
            $seed,
            $inputs,
            |$t: &mut Tape<f32>, $v: &[Var]| -> Result<Var> { $body },
            |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> { $body },
        )
    }};
}

const TOL: f64 = 1e-4;

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(p, p).unwrap();
    let loss = tape.sum(sq);
    let g = tape.grad(loss, &[p]).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0]);
}

#[test]
fn constant_function_gives_zero_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let c = tape.constant(Tensor::vector(vec![4.0]));
    let loss = tape.sum(c);
    let g = tape.grad(loss, &[p]).unwrap();
    assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.grad(p, &[p]), Err(Error::NonScalarLoss(_))));
}

#[test]
fn foreign_param_rejected() {
    let mut other = Tape::new();
    let foreign = other.param(Tensor::vector(vec![1.0]));
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![1.0]));
    let loss = tape.sum(p);
    let err = tape.grad(loss, &[foreign]).unwrap_err();
    assert!(matches!(err, Error::NotOnTape(_)));
}

#[test]
fn matmul_gradients() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "matmul");
        let a = rand_tensor(&mut r, &[3, 5], 1.0);
        let b = rand_tensor(&mut r, &[5, 4], 1.0);
        let bt = rand_tensor(&mut r, &[4, 5], 1.0);
        let e = check!(seed, vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
        assert!(e < TOL, "matmul rel err {e}");
        let e = check!(seed, vec![a, bt], |t, v| t.matmul_t(v[0], v[1]));
        assert!(e < TOL, "matmul_t rel err {e}");
    }
}

#[test]
fn add_and_bias_gradients() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "add");
        let a = rand_tensor(&mut r, &[4, 6], 1.0);
        let b = rand_tensor(&mut r, &[4, 6], 1.0);
        let bias = rand_tensor(&mut r, &[6], 1.0);
        let e = check!(seed, vec![a.clone(), b], |t, v| t.add(v[0], v[1]));
        assert!(e < TOL, "add rel err {e}");
        let e = check!(seed, vec![a, bias], |t, v| t.add_row(v[0], v[1]));
        assert!(e < TOL, "add_row rel err {e}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "relu");
        let mut a = rand_tensor(&mut r, &[5, 7], 1.0);
        for x in a.data_mut() {
            if x.abs() < 1e-2 {
                *x = if *x >= 0.0 { 0.1 } else { -0.1 };
            }
        }
        let e = check!(seed, vec![a], |t, v| t.relu(v[0]));
        assert!(e < TOL, "relu rel err {e}");
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let r = tape.relu(p).unwrap();
    let loss = tape.sum(r);
    assert_eq!(tape.grad(loss, &[p]).unwrap()[0].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn softmax_gradient() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "softmax");
        let a = rand_tensor(&mut r, &[4, 8], 1.0);
        let e = check!(seed, vec![a], |t, v| t.softmax(v[0]));
        assert!(e < TOL, "softmax rel err {e}");
    }
}

#[test]
fn softmax_is_overflow_safe() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let s = tape.softmax(a).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn rms_norm_gradient() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "rms");
        let a = rand_tensor(&mut r, &[3, 8], 1.0);
        let s = rand_tensor(&mut r, &[8], 1.0);
        let e = check!(seed, vec![a, s], |t, v| t.rms_norm(v[0], v[1]));
        assert!(e < TOL, "rms_norm rel err {e}");
    }
}

#[test]
fn gather_gradient_accumulates_repeats() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "gather");
        let table = rand_tensor(&mut r, &[6, 4], 1.0);
        let e = check!(seed, vec![table], |t, v| t.gather(v[0], vec![0, 3, 3, 5, 0]));
        assert!(e < TOL, "gather rel err {e}");
    }
}

#[test]
fn prepend_rows_gradient() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "prepend");
        let prefix = rand_tensor(&mut r, &[2, 4], 1.0);
        let rows = rand_tensor(&mut r, &[6, 4], 1.0);
        let e = check!(seed, vec![prefix, rows], |t, v| t.prepend_rows(v[0], v[1], 3));
        assert!(e < TOL, "prepend rel err {e}");
    }
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "ce");
        let logits = rand_tensor(&mut r, &[5, 7], 1.0);
        let targets = vec![Some(1), None, Some(6), Some(0), Some(3)];
        let e = check!(seed, vec![logits], |t, v| t.cross_entropy(v[0], targets.clone()));
        assert!(e < TOL, "cross_entropy rel err {e}");
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_v() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[3, 32]));
    let ce = tape.cross_entropy(l, vec![Some(0), Some(5), Some(31)]).unwrap();
    assert!((tape.value(ce).item() - 32f32.ln()).abs() < 1e-6);
}

#[test]
fn attention_gradient() {
    for (seed, causal) in [(0, false), (1, true), (2, false), (3, true)] {
        let mut r = seeded_rng(seed, "attn");
        let layout = AttnLayout { batch: 2, q_len: 3, k_len: 3, heads: 2, causal };
        let q = rand_tensor(&mut r, &[6, 8], 1.0);
        let k = rand_tensor(&mut r, &[6, 8], 1.0);
        let v = rand_tensor(&mut r, &[6, 8], 1.0);
        let valid = vec![true, true, true, true, false, true];
        let e = check!(seed, vec![q, k, v], |t, vs| t.attention(vs[0], vs[1], vs[2], layout.clone(), &valid));
        assert!(e < TOL, "attention (causal={causal}) rel err {e}");
    }
}

#[test]
fn cross_attention_gradient() {
    let mut r = seeded_rng(9, "xattn");
    let layout = AttnLayout { batch: 2, q_len: 2, k_len: 4, heads: 4, causal: false };
    let q = rand_tensor(&mut r, &[4, 8], 1.0);
    let k = rand_tensor(&mut r, &[8, 8], 1.0);
    let v = rand_tensor(&mut r, &[8, 8], 1.0);
    let valid = vec![true, true, false, false, true, true, true, true];
    let e = check!(9, vec![q, k, v], |t, vs| t.attention(vs[0], vs[1], vs[2], layout.clone(), &valid));
    assert!(e < TOL, "cross attention rel err {e}");
}

#[test]
fn two_layer_net_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = seeded_rng(seed, "mlp");
        let x = rand_tensor(&mut r, &[3, 4], 1.0);
        let w1 = rand_tensor(&mut r, &[4, 4], 0.5);
        let b1 = rand_tensor(&mut r, &[4], 0.5);
        let w2 = rand_tensor(&mut r, &[4, 4], 0.5);
        let e = check!(seed, vec![x, w1, b1, w2], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.relu(h)?;
            let o = t.matmul(h, v[3])?;
            t.cross_entropy(o, vec![Some(0), Some(2), Some(3)])
        });
        assert!(e < TOL, "two-layer net rel err {e}");
    }
}

#[test]
fn backward_is_linear_in_losses() {
    let mut r = seeded_rng(4, "linear");
    let mut tape = Tape::new();
    let p = tape.param(rand_tensor(&mut r, &[3, 4], 1.0));
    let w = tape.constant(rand_tensor(&mut r, &[4, 2], 1.0));
    let h = tape.matmul(p, w).unwrap();
    let l1 = tape.cross_entropy(h, vec![Some(0), Some(1), Some(1)]).unwrap();
    let s = tape.softmax(h).unwrap();
    let l2 = tape.sum(s);
    let total = tape.add(l1, l2).unwrap();
    let g1 = tape.grad(l1, &[p]).unwrap().remove(0);
    let g2 = tape.grad(l2, &[p]).unwrap().remove(0);
    let gt = tape.grad(total, &[p]).unwrap().remove(0);
    for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(gt.data()) {
        assert!((a + b - c).abs() <= 1e-6 * (a.abs() + b.abs()).max(1.0));
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut r = seeded_rng(5, "replay");
        let mut tape = Tape::new();
        let p = tape.param(rand_tensor(&mut r, &[4, 8], 1.0));
        let k = tape.constant(rand_tensor(&mut r, &[4, 8], 1.0));
        let layout = AttnLayout { batch: 1, q_len: 4, k_len: 4, heads: 2, causal: true };
        let a = tape.attention(p, k, k, layout, &[true; 4]).unwrap();
        let loss = tape.cross_entropy(a, vec![Some(1), Some(2), Some(3), Some(0)]).unwrap();
        let g = tape.grad(loss, &[p]).unwrap().remove(0);
        (tape.value(a).clone(), g)
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert!(a1.bit_eq(&a2));
    assert!(g1.bit_eq(&g2));
}

#[test]
fn frozen_leaves_get_no_gradient_storage() {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::full(&[2, 2], 0.5));
    let p = tape.param(Tensor::full(&[1, 2], 1.0));
    let h = tape.matmul(p, w).unwrap();
    let loss = tape.sum(h);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.has(p));
    assert!(!grads.has(w));
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.matmul(a, b).is_err());
    assert!(tape.gather(a, vec![5]).is_err());
    let bias = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.add_row(a, bias).is_err());
}
