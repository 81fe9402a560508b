//! Finite-difference gradient cases shared by the gradient and acceptance
//! test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texmotion_core::neural::layers::{multi_head_attention, Attention};
use texmotion_core::neural::{grad_check, Bound, NeuralError, ParamStore, Scalar, Tape, Tensor, Var};

type Graph<S> = Box<dyn Fn(&mut Tape<S>, &[Var]) -> Result<Var, NeuralError>>;

/// Every differentiable operator, plus attention and a small composed model.
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias_channel",
    "add_bias_last",
    "matmul",
    "batch_matmul",
    "batch_matmul_ta",
    "batch_matmul_tb",
    "batch_matmul_ta_tb",
    "reshape",
    "permute",
    "relu",
    "gelu",
    "softmax",
    "softmax_causal",
    "layer_norm",
    "embedding",
    "conv2d",
    "conv2d_strided",
    "conv_transpose2d",
    "conv_transpose2d_strided",
    "sum",
    "mean",
    "sum_squares",
    "cross_entropy",
    "attention",
    "attention_causal",
    "composite",
];

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;

fn uniform<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| S::from_f64c(rng.random_range(-1.0..1.0)))
}

fn wide<S: Scalar>(shape: &[usize], factor: f64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Tensor::from_fn(shape, |_| S::from_f64c(factor * rng.random_range(-1.0..1.0)))
}

/// Values bounded away from zero so no probe crosses the ReLU kink.
fn off_kink<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.0);
        S::from_f64c(if rng.random::<bool>() { m } else { -m })
    })
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so every output coordinate
/// gets a distinct upstream gradient.
fn project<S: Scalar>(tape: &mut Tape<S>, y: Var) -> Result<Var, NeuralError> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| S::from_f64c((i as f64 * 0.731 + 0.3).sin()));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn unary<S: Scalar>(f: impl Fn(&mut Tape<S>, Var) -> Result<Var, NeuralError> + 'static) -> Graph<S> {
    Box::new(move |t, v| {
        let y = f(t, v[0])?;
        project(t, y)
    })
}

fn binary<S: Scalar>(f: impl Fn(&mut Tape<S>, Var, Var) -> Result<Var, NeuralError> + 'static) -> Graph<S> {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        project(t, y)
    })
}

fn attention_case<S: Scalar>(causal: bool) -> (Vec<Tensor<S>>, Graph<S>) {
    let (n, len, width, heads) = (2, 4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<S>::new();
    let attn = Attention::new(&mut store, "attn", width, &mut rng);
    let mut inputs = vec![uniform::<S>(&[n, len, width], 12)];
    for (i, (_, t)) in store.iter().enumerate() {
        inputs.push(uniform::<S>(t.shape(), 100 + i as u64));
    }
    let graph: Graph<S> = Box::new(move |t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let y = multi_head_attention(t, &bound, v[0], &attn, heads, causal)?;
        project(t, y)
    });
    (inputs, graph)
}

fn build<S: Scalar>(name: &str) -> (Vec<Tensor<S>>, Graph<S>) {
    let x = |shape: &[usize]| uniform::<S>(shape, 1);
    let y = |shape: &[usize]| uniform::<S>(shape, 2);
    match name {
        "add" => (vec![x(&[2, 3, 4]), y(&[2, 3, 4])], binary(|t, a, b| t.add(a, b))),
        "sub" => (vec![x(&[2, 3, 4]), y(&[2, 3, 4])], binary(|t, a, b| t.sub(a, b))),
        "mul" => (vec![x(&[2, 3, 4]), y(&[2, 3, 4])], binary(|t, a, b| t.mul(a, b))),
        "scale" => (vec![x(&[2, 3, 4])], unary(|t, a| t.scale(a, -1.7))),
        "add_bias_channel" => (vec![x(&[2, 3, 4]), y(&[3])], binary(|t, a, b| t.add_bias(a, b, 1))),
        "add_bias_last" => (vec![x(&[2, 3, 4]), y(&[4])], binary(|t, a, b| t.add_bias(a, b, 2))),
        "matmul" => (vec![x(&[2, 3, 4]), y(&[4, 5])], binary(|t, a, b| t.matmul(a, b))),
        "batch_matmul" => (vec![x(&[2, 3, 4]), y(&[2, 4, 5])], binary(|t, a, b| t.batch_matmul(a, b, false, false))),
        "batch_matmul_ta" => (vec![x(&[2, 4, 3]), y(&[2, 4, 5])], binary(|t, a, b| t.batch_matmul(a, b, true, false))),
        "batch_matmul_tb" => (vec![x(&[2, 3, 4]), y(&[2, 5, 4])], binary(|t, a, b| t.batch_matmul(a, b, false, true))),
        "batch_matmul_ta_tb" => (vec![x(&[2, 4, 3]), y(&[2, 5, 4])], binary(|t, a, b| t.batch_matmul(a, b, true, true))),
        "reshape" => (vec![x(&[2, 3, 4])], unary(|t, a| t.reshape(a, &[6, 4]))),
        "permute" => (vec![x(&[2, 3, 4])], unary(|t, a| t.permute(a, &[2, 0, 1]))),
        "relu" => (vec![off_kink(&[3, 7], 3)], unary(|t, a| t.relu(a))),
        "gelu" => (vec![wide(&[3, 7], 3.0)], unary(|t, a| t.gelu(a))),
        "softmax" => (vec![wide(&[2, 3, 5], 2.0)], unary(|t, a| t.softmax(a, false))),
        "softmax_causal" => (vec![wide(&[2, 4, 4], 2.0)], unary(|t, a| t.softmax(a, true))),
        "layer_norm" => (
            vec![x(&[3, 6]), y(&[6]), uniform(&[6], 4)],
            Box::new(|t, v| {
                let out = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, out)
            }),
        ),
        "embedding" => (vec![x(&[7, 4])], unary(|t, a| t.embedding(a, &[1, 3, 3, 6, 0]))),
        "conv2d" => (vec![x(&[2, 2, 5, 5]), y(&[3, 2, 3, 3])], binary(|t, a, b| t.conv2d(a, b, 1, 1))),
        "conv2d_strided" => (vec![x(&[2, 2, 6, 6]), y(&[3, 2, 4, 4])], binary(|t, a, b| t.conv2d(a, b, 2, 1))),
        "conv_transpose2d" => (vec![x(&[2, 3, 3, 3]), y(&[3, 2, 3, 3])], binary(|t, a, b| t.conv_transpose2d(a, b, 1, 0))),
        "conv_transpose2d_strided" => {
            (vec![x(&[2, 3, 3, 3]), y(&[3, 2, 4, 4])], binary(|t, a, b| t.conv_transpose2d(a, b, 2, 1)))
        }
        "sum" => (vec![x(&[2, 3, 4])], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![x(&[2, 3, 4])], Box::new(|t, v| t.mean(v[0]))),
        "sum_squares" => (vec![x(&[2, 3, 4])], Box::new(|t, v| t.sum_squares(v[0]))),
        "cross_entropy" => (
            vec![wide(&[2, 3, 5], 2.0)],
            Box::new(|t, v| t.cross_entropy(v[0], &[Some(0), Some(4), None, Some(2), Some(2), Some(1)])),
        ),
        "attention" => attention_case(false),
        "attention_causal" => attention_case(true),
        "composite" => (
            vec![x(&[6, 4]), y(&[4, 8]), uniform(&[8], 5), uniform(&[8], 6), uniform(&[8, 6], 7)],
            Box::new(|t, v| {
                let e = t.embedding(v[0], &[0, 5, 2, 2, 3, 1])?;
                let e = t.reshape(e, &[2, 3, 4])?;
                let h = t.matmul(e, v[1])?;
                let h = t.layer_norm(h, v[2], v[3], 1e-5)?;
                let h = t.gelu(h)?;
                let logits = t.matmul(h, v[4])?;
                t.cross_entropy(logits, &[Some(1), Some(3), Some(5), None, Some(0), Some(2)])
            }),
        ),
        other => panic!("unknown gradient case {other}"),
    }
}

/// Largest relative gradient error of `name` in precision `S`.
pub fn check<S: Scalar>(name: &str, epsilon: f64) -> f64 {
    let (inputs, graph) = build::<S>(name);
    let report = grad_check(graph, &inputs, epsilon).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(report.coordinates_checked > 0, "{name}: nothing checked");
    report.max_relative_error
}

pub fn check_f64(name: &str) -> f64 {
    check::<f64>(name, 1e-6)
}

pub fn check_f32(name: &str) -> f64 {
    check::<f32>(name, 8e-3)
}

/// `loss = sum(sg(x) * x)`: returns `(grad, x)`; the two must be equal.
pub fn stop_gradient_probe() -> (Vec<f64>, Vec<f64>) {
    let x = uniform::<f64>(&[3, 5], 9);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let blocked = tape.stop_gradient(v);
    let prod = tape.mul(blocked, v).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    (tape.grad(v).expect("leaf gradient").to_vec(), x.data().to_vec())
}

/// Forward through `sg` must be bit-identical to the input.
pub fn stop_gradient_forward_exact() -> bool {
    let x = uniform::<f32>(&[4, 4], 10);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let s = tape.stop_gradient(v);
    tape.value(s).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}

