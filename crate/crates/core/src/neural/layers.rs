//! Parameter bundles and their forward passes.

use rand::Rng;

use super::params::Bound;
use super::{NeuralError, ParamId, ParamStore, Scalar, Tape, Var};

/// Standard deviation of projection weights at initialization.
pub const PROJECTION_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight: [input, output]` drawn from N(0, 0.02), zero bias.
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[input, output], PROJECTION_STD, rng),
            bias: store.add_const(format!("{name}.bias"), &[output], 0.0),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var, NeuralError> {
        let y = tape.matmul(x, p.get(self.weight))?;
        let axis = tape.shape(y).len() - 1;
        tape.add_bias(y, p.get(self.bias), axis)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var, NeuralError> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Square-kernel convolution (or transposed convolution) with per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    /// He-normal kernel, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        let fan_in = if transposed { cout * k * k / (stride * stride) } else { cin * k * k };
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self {
            kernel: store.add_normal(format!("{name}.kernel"), &shape, std, rng),
            bias: store.add_const(format!("{name}.bias"), &[cout], 0.0),
            stride,
            padding,
            transposed,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var, NeuralError> {
        let y = if self.transposed {
            tape.conv_transpose2d(x, p.get(self.kernel), self.stride, self.padding)?
        } else {
            tape.conv2d(x, p.get(self.kernel), self.stride, self.padding)?
        };
        tape.add_bias(y, p.get(self.bias), 1)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
        }
    }
}

/// Scaled dot-product attention over `x[N, T, d]` split into `heads` heads.
/// With `causal`, position `t` attends only to positions `<= t`.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    x: Var,
    attn: &Attention,
    heads: usize,
    causal: bool,
) -> Result<Var, NeuralError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 || shape[1] == 0 {
        return Err(NeuralError::Shape {
            op: "multi_head_attention",
            detail: format!("input {shape:?} with {heads} heads"),
        });
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape<S>, proj: &Linear| -> Result<Var, NeuralError> {
        let y = proj.forward(tape, p, x)?;
        let y = tape.reshape(y, &[n, t, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, &attn.query)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = split(tape, &attn.key)?;
    let v = split(tape, &attn.value)?;
    let scores = tape.batch_matmul(q, k, false, true)?;
    let weights = tape.softmax(scores, causal)?;
    let ctx = tape.batch_matmul(weights, v, false, false)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    attn.output.forward(tape, p, ctx)
}
