use super::conv::{col2im, conv_out_len, im2col, ConvGeom};
use super::{gemm, MatView, NeuralError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize, axis: usize },
    /// `a[.., K] @ b[K, N]`.
    MatMul { a: usize, b: usize },
    /// Batched `op(a) @ op(b)` over equal leading dims.
    BatchMatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embedding { table: usize, indices: Vec<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom },
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, count: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of forward operations, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // Copy whole runs when the innermost axis is untouched.
    let (outer_rank, run) = if rank > 0 && axes[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut counter = vec![0usize; outer_rank];
    let total = data.len() / run.max(1);
    for _ in 0..total {
        let offset: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.extend_from_slice(&data[offset..offset + run]);
        for d in (0..outer_rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor<S>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, inputs: &[usize], op: Op) -> Result<Var, NeuralError> {
        if !value.all_finite() {
            return Err(NeuralError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn val(&self, i: usize) -> &Tensor<S> {
        &self.nodes[i].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NeuralError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Result<Var, NeuralError> {
        self.same_shape(name, a, b)?;
        let data = self.val(a.0).data().iter().zip(self.val(b.0).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_map("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_map("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_map("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NeuralError> {
        let f = S::from_f64c(factor);
        let data = self.val(x.0).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("scale", value, &[x.0], Op::Scale(x.0, factor))
    }

    /// Adds a rank-1 `bias` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, NeuralError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(shape_err("add_bias", format!("x {shape:?}, bias {:?}, axis {axis}", self.shape(bias))));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let b = self.val(bias.0).data();
        let mut data = self.val(x.0).data().to_vec();
        if inner == 1 {
            for row in data.chunks_mut(b.len()) {
                add_into(row, b);
            }
        } else {
            for (run, &bv) in data.chunks_mut(inner).zip(b.iter().cycle()) {
                run.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&shape, data)?;
        self.push("add_bias", value, &[x.0, bias.0], Op::AddBias { x: x.0, bias: bias.0, axis })
    }

    /// `a[.., K] @ b[K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.is_empty() || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(shape_err("matmul", format!("{ashape:?} @ {bshape:?}")));
        }
        let (k, n) = (bshape[0], bshape[1]);
        let m = self.val(a.0).numel() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        gemm(
            MatView::row_major(self.val(a.0).data(), 0, m, k),
            MatView::row_major(self.val(b.0).data(), 0, k, n),
            &mut out,
            0,
            false,
        );
        let mut oshape = ashape;
        *oshape.last_mut().unwrap() = n;
        let value = Tensor::new(&oshape, out)?;
        self.push("matmul", value, &[a.0, b.0], Op::MatMul { a: a.0, b: b.0 })
    }

    /// Batched matrix product over the leading dimensions, with optional
    /// transposition of either operand's last two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NeuralError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let r = ashape.len();
        if r < 2 || bshape.len() != r || ashape[..r - 2] != bshape[..r - 2] {
            return Err(shape_err("batch_matmul", format!("{ashape:?} @ {bshape:?}")));
        }
        let (am, ak) = if ta { (ashape[r - 1], ashape[r - 2]) } else { (ashape[r - 2], ashape[r - 1]) };
        let (bk, bn) = if tb { (bshape[r - 1], bshape[r - 2]) } else { (bshape[r - 2], bshape[r - 1]) };
        if ak != bk {
            return Err(shape_err("batch_matmul", format!("{ashape:?} @ {bshape:?} (ta={ta}, tb={tb})")));
        }
        let batch: usize = ashape[..r - 2].iter().product();
        let (asz, bsz) = (ashape[r - 2] * ashape[r - 1], bshape[r - 2] * bshape[r - 1]);
        let mut out = vec![S::zero(); batch * am * bn];
        let (ad, bd) = (self.val(a.0).data(), self.val(b.0).data());
        for i in 0..batch {
            let av = MatView::row_major(ad, i * asz, ashape[r - 2], ashape[r - 1]);
            let bv = MatView::row_major(bd, i * bsz, bshape[r - 2], bshape[r - 1]);
            gemm(
                if ta { av.t() } else { av },
                if tb { bv.t() } else { bv },
                &mut out,
                i * am * bn,
                false,
            );
        }
        let mut oshape = ashape[..r - 2].to_vec();
        oshape.extend([am, bn]);
        let value = Tensor::new(&oshape, out)?;
        self.push("batch_matmul", value, &[a.0, b.0], Op::BatchMatMul { a: a.0, b: b.0, ta, tb })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NeuralError> {
        let value = self.val(x.0).clone().reshaped(shape)?;
        self.push("reshape", value, &[x.0], Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NeuralError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let data = permute_data(self.val(x.0).data(), &shape, axes);
        let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(&oshape, data)?;
        self.push("permute", value, &[x.0], Op::Permute { x: x.0, axes: axes.to_vec() })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NeuralError> {
        let data = self.val(x.0).data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("relu", value, &[x.0], Op::Relu(x.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (c, a, half) = (S::from_f64c(GELU_C), S::from_f64c(GELU_A), S::from_f64c(0.5));
        let data = self
            .val(x.0)
            .data()
            .iter()
            .map(|&v| half * v * (S::one() + tanh(c * (v + a * v * v * v))))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("gelu", value, &[x.0], Op::Gelu(x.0))
    }

    /// Softmax over the last axis. With `causal`, the last two axes must form a
    /// square `[T, T]` block and entry `(i, j)` is masked out for `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var, NeuralError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r == 0 || (causal && (r < 2 || shape[r - 1] != shape[r - 2])) {
            return Err(shape_err("softmax", format!("shape {shape:?}, causal {causal}")));
        }
        let width = shape[r - 1];
        let mut out = vec![S::zero(); self.val(x.0).numel()];
        for (row, (src, dst)) in self.val(x.0).data().chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let live = if causal { row % width + 1 } else { width };
            let max = src[..live].iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for (d, &s) in dst[..live].iter_mut().zip(&src[..live]) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in &mut dst[..live] {
                *d /= total;
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("softmax", value, &[x.0], Op::Softmax(x.0))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the elementwise affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NeuralError> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 || self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(shape_err("layer_norm", format!("x {shape:?}, gamma {:?}", self.shape(gamma))));
        }
        let (g, b) = (self.val(gamma.0).data(), self.val(beta.0).data());
        let mut out = vec![S::zero(); self.val(x.0).numel()];
        for (src, dst) in self.val(x.0).data().chunks(width).zip(out.chunks_mut(width)) {
            let (mean, rstd) = row_stats(src, eps);
            for j in 0..width {
                dst[j] = (src[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "layer_norm",
            value,
            &[x.0, gamma.0, beta.0],
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
        )
    }

    /// Gathers rows of `table[V, D]`; output shape `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NeuralError> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(shape_err("embedding", format!("table {tshape:?}")));
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(NeuralError::InvalidArgument(format!("embedding index {bad} >= {vocab}")));
        }
        let t = self.val(table.0).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(&[indices.len(), dim], out)?;
        self.push("embedding", value, &[table.0], Op::Embedding { table: table.0, indices: indices.to_vec() })
    }

    /// Cross-correlation of `x[N, Cin, H, W]` with `w[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, NeuralError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if stride == 0 {
            return Err(NeuralError::InvalidArgument("conv2d stride must be positive".into()));
        }
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        let (Some(oh), Some(ow)) = (conv_out_len(xs[2], k, stride, padding), conv_out_len(xs[3], k, stride, padding)) else {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        };
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], k, stride, padding, oh, ow };
        let cout = ws[0];
        let cols = im2col(self.val(x.0).data(), &geom);
        let ckk = geom.c * k * k;
        let ncols = geom.n * oh * ow;
        // [Cout, N*OH*OW]
        let mut tmp = vec![S::zero(); cout * ncols];
        gemm(
            MatView::row_major(self.val(w.0).data(), 0, cout, ckk),
            MatView::row_major(&cols, 0, ckk, ncols),
            &mut tmp,
            0,
            false,
        );
        let out = permute_data(&tmp, &[cout, geom.n, oh * ow], &[1, 0, 2]);
        let value = Tensor::new(&[geom.n, cout, oh, ow], out)?;
        self.push("conv2d", value, &[x.0, w.0], Op::Conv2d { x: x.0, w: w.0, geom })
    }

    /// Transposed convolution of `x[N, Cin, H, W]` with `w[Cin, Cout, k, k]`;
    /// the adjoint of [`Tape::conv2d`] with the same stride and padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, NeuralError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if stride == 0 {
            return Err(NeuralError::InvalidArgument("conv_transpose2d stride must be positive".into()));
        }
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv_transpose2d", format!("x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        let full = |len: usize| ((len - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (full(xs[2]), full(xs[3])) else {
            return Err(shape_err("conv_transpose2d", format!("padding {padding} too large for {xs:?}")));
        };
        let (cin, cout) = (ws[0], ws[1]);
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom { n: xs[0], c: cout, h: oh, w: ow, k, stride, padding, oh: xs[2], ow: xs[3] };
        if conv_out_len(oh, k, stride, padding) != Some(xs[2]) || conv_out_len(ow, k, stride, padding) != Some(xs[3]) {
            return Err(shape_err("conv_transpose2d", format!("inconsistent geometry for {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let ncols = geom.n * hw;
        let xr = permute_data(self.val(x.0).data(), &[geom.n, cin, hw], &[1, 0, 2]);
        let ckk = cout * k * k;
        let mut cols = vec![S::zero(); ckk * ncols];
        gemm(
            MatView::row_major(self.val(w.0).data(), 0, cin, ckk).t(),
            MatView::row_major(&xr, 0, cin, ncols),
            &mut cols,
            0,
            false,
        );
        let mut out = vec![S::zero(); geom.n * cout * oh * ow];
        col2im(&cols, &geom, &mut out);
        let value = Tensor::new(&[geom.n, cout, oh, ow], out)?;
        self.push("conv_transpose2d", value, &[x.0, w.0], Op::ConvTranspose2d { x: x.0, w: w.0, geom })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NeuralError> {
        let total = self.val(x.0).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), &[x.0], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NeuralError> {
        let n = self.val(x.0).numel();
        if n == 0 {
            return Err(NeuralError::InvalidArgument("mean of an empty tensor".into()));
        }
        let total: S = self.val(x.0).data().iter().copied().sum();
        let value = Tensor::scalar(total / S::from_usize(n).unwrap());
        self.push("mean", value, &[x.0], Op::Mean(x.0))
    }

    /// `sum(x * x)`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var, NeuralError> {
        let total = self.val(x.0).data().iter().map(|&v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(total), &[x.0], Op::SumSquares(x.0))
    }

    /// Identity in the forward pass; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.val(x.0).clone();
        self.push_raw(value, false, Op::StopGradient)
    }

    /// Mean next-token cross-entropy of `logits[.., V]` rows against
    /// `targets`; rows whose target is `None` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NeuralError> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap_or(&0);
        let rows = self.val(logits.0).numel() / vocab.max(1);
        if vocab == 0 || rows != targets.len() {
            return Err(shape_err("cross_entropy", format!("logits {shape:?}, {} targets", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(NeuralError::InvalidArgument(format!("target {bad} >= vocabulary {vocab}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NeuralError::InvalidArgument("cross_entropy with no targets".into()));
        }
        let mut total = 0.0f64;
        for (row, t) in self.val(logits.0).data().chunks(vocab).zip(targets) {
            if let Some(t) = *t {
                total -= log_softmax_at(row, t).to_f64c();
            }
        }
        let value = Tensor::scalar(S::from_f64c(total / count as f64));
        self.push(
            "cross_entropy",
            value,
            &[logits.0],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), count },
        )
    }

    fn take_grad(&mut self, i: usize) -> Vec<S> {
        match self.nodes[i].grad.take() {
            Some(g) => g,
            None => vec![S::zero(); self.nodes[i].value.numel()],
        }
    }

    fn put_grad(&mut self, i: usize, g: Vec<S>) {
        match &mut self.nodes[i].grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Accumulates into the gradient of input `i` via `f`, if it needs one.
    fn accumulate(&mut self, i: usize, f: impl FnOnce(&Self, &mut [S])) {
        if !self.wants(i) {
            return;
        }
        let mut g = self.take_grad(i);
        f(self, &mut g);
        self.put_grad(i, g);
    }

    /// Clears all gradients, then back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NeuralError> {
        if self.value(loss).numel() != 1 {
            return Err(NeuralError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(NeuralError::Detached);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, op: &Op, g: &[S]) {
        match *op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(a, |_, ga| add_into(ga, g));
                self.accumulate(b, |_, gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |_, ga| add_into(ga, g));
                self.accumulate(b, |_, gb| gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |t, ga| {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(t.val(b).data()) {
                        *d += v * y;
                    }
                });
                self.accumulate(b, |t, gb| {
                    for ((d, &v), &x) in gb.iter_mut().zip(g).zip(t.val(a).data()) {
                        *d += v * x;
                    }
                });
            }
            Op::Scale(x, factor) => {
                let f = S::from_f64c(factor);
                self.accumulate(x, |_, gx| gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * f));
            }
            Op::AddBias { x, bias, axis } => {
                self.accumulate(x, |_, gx| add_into(gx, g));
                let shape = self.val(out).shape().to_vec();
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(bias, |_, gb| {
                    if inner == 1 {
                        for row in g.chunks(gb.len()) {
                            add_into(gb, row);
                        }
                    } else {
                        let channels = gb.len();
                        for (i, run) in g.chunks(inner).enumerate() {
                            gb[i % channels] += run.iter().copied().sum::<S>();
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (k, n) = (self.val(b).shape()[0], self.val(b).shape()[1]);
                let m = self.val(a).numel() / k.max(1);
                self.accumulate(a, |t, ga| {
                    gemm(
                        MatView::row_major(g, 0, m, n),
                        MatView::row_major(t.val(b).data(), 0, k, n).t(),
                        ga,
                        0,
                        true,
                    );
                });
                self.accumulate(b, |t, gb| {
                    gemm(
                        MatView::row_major(t.val(a).data(), 0, m, k).t(),
                        MatView::row_major(g, 0, m, n),
                        gb,
                        0,
                        true,
                    );
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => self.backward_bmm(out, a, b, ta, tb, g),
            Op::Reshape(x) => self.accumulate(x, |_, gx| add_into(gx, g)),
            Op::Permute { x, ref axes } => {
                let oshape = self.val(out).shape().to_vec();
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, &oshape, &inverse);
                self.accumulate(x, |_, gx| add_into(gx, &back));
            }
            Op::Relu(x) => self.accumulate(x, |t, gx| {
                for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(t.val(x).data()) {
                    if xv > S::zero() {
                        *d += v;
                    }
                }
            }),
            Op::Gelu(x) => self.accumulate(x, |t, gx| {
                let (c, a, half) = (S::from_f64c(GELU_C), S::from_f64c(GELU_A), S::from_f64c(0.5));
                let three = S::from_f64c(3.0);
                for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(t.val(x).data()) {
                    let th = tanh(c * (xv + a * xv * xv * xv));
                    let dydx = half * (S::one() + th) + half * xv * (S::one() - th * th) * c * (S::one() + three * a * xv * xv);
                    *d += v * dydx;
                }
            }),
            Op::Softmax(x) => {
                let width = *self.val(out).shape().last().unwrap();
                self.accumulate(x, |t, gx| {
                    let y = t.val(out).data();
                    for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..width {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => self.backward_layer_norm(x, gamma, beta, eps, g),
            Op::Embedding { table, ref indices } => {
                let dim = self.val(table).shape()[1];
                self.accumulate(table, |_, gt| {
                    for (row, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * dim..(i + 1) * dim], &g[row * dim..(row + 1) * dim]);
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let cout = self.val(w).shape()[0];
                let ckk = geom.c * geom.k * geom.k;
                let ncols = geom.n * geom.oh * geom.ow;
                let gy = permute_data(g, &[geom.n, cout, geom.oh * geom.ow], &[1, 0, 2]);
                if self.wants(w) {
                    let cols = im2col(self.val(x).data(), &geom);
                    self.accumulate(w, |_, gw| {
                        gemm(
                            MatView::row_major(&gy, 0, cout, ncols),
                            MatView::row_major(&cols, 0, ckk, ncols).t(),
                            gw,
                            0,
                            true,
                        );
                    });
                }
                self.accumulate(x, |t, gx| {
                    let mut dcols = vec![S::zero(); ckk * ncols];
                    gemm(
                        MatView::row_major(t.val(w).data(), 0, cout, ckk).t(),
                        MatView::row_major(&gy, 0, cout, ncols),
                        &mut dcols,
                        0,
                        false,
                    );
                    col2im(&dcols, &geom, gx);
                });
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let cin = self.val(w).shape()[0];
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.oh * geom.ow;
                let ncols = geom.n * hw;
                let gcols = im2col(g, &geom);
                self.accumulate(x, |t, gx| {
                    let mut tmp = vec![S::zero(); cin * ncols];
                    gemm(
                        MatView::row_major(t.val(w).data(), 0, cin, ckk),
                        MatView::row_major(&gcols, 0, ckk, ncols),
                        &mut tmp,
                        0,
                        false,
                    );
                    add_into(gx, &permute_data(&tmp, &[cin, geom.n, hw], &[1, 0, 2]));
                });
                if self.wants(w) {
                    let xr = permute_data(self.val(x).data(), &[geom.n, cin, hw], &[1, 0, 2]);
                    self.accumulate(w, |_, gw| {
                        gemm(
                            MatView::row_major(&xr, 0, cin, ncols),
                            MatView::row_major(&gcols, 0, ckk, ncols).t(),
                            gw,
                            0,
                            true,
                        );
                    });
                }
            }
            Op::Sum(x) => self.accumulate(x, |_, gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = S::from_usize(self.val(x).numel()).unwrap();
                self.accumulate(x, |_, gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumSquares(x) => self.accumulate(x, |t, gx| {
                let two = S::from_f64c(2.0);
                for (d, &v) in gx.iter_mut().zip(t.val(x).data()) {
                    *d += two * v * g[0];
                }
            }),
            Op::CrossEntropy { logits, ref targets, count } => {
                let vocab = *self.val(logits).shape().last().unwrap();
                let scale = g[0] / S::from_usize(count).unwrap();
                self.accumulate(logits, |t, gl| {
                    let rows = t.val(logits).data().chunks(vocab);
                    for ((row, target), dr) in rows.zip(targets).zip(gl.chunks_mut(vocab)) {
                        let Some(target) = *target else { continue };
                        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                        let total: S = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / total;
                            let onehot = if j == target { S::one() } else { S::zero() };
                            dr[j] += (p - onehot) * scale;
                        }
                    }
                });
            }
        }
    }

    fn backward_bmm(&mut self, out: usize, a: usize, b: usize, ta: bool, tb: bool, g: &[S]) {
        let ashape = self.val(a).shape().to_vec();
        let bshape = self.val(b).shape().to_vec();
        let oshape = self.val(out).shape().to_vec();
        let r = ashape.len();
        let batch: usize = ashape[..r - 2].iter().product();
        let (ar, ac) = (ashape[r - 2], ashape[r - 1]);
        let (br, bc) = (bshape[r - 2], bshape[r - 1]);
        let (m, n) = (oshape[r - 2], oshape[r - 1]);
        let (asz, bsz, gsz) = (ar * ac, br * bc, m * n);
        // With A = op(a), B = op(b), C = A B:  dA = dC B^T,  dB = A^T dC.
        self.accumulate(a, |t, ga| {
            let bd = t.val(b).data();
            for i in 0..batch {
                let gv = MatView::row_major(g, i * gsz, m, n);
                let bv = MatView::row_major(bd, i * bsz, br, bc);
                let beff = if tb { bv.t() } else { bv };
                if ta {
                    // a stores A^T, so da = B dC^T
                    gemm(beff, gv.t(), ga, i * asz, true);
                } else {
                    gemm(gv, beff.t(), ga, i * asz, true);
                }
            }
        });
        self.accumulate(b, |t, gb| {
            let ad = t.val(a).data();
            for i in 0..batch {
                let gv = MatView::row_major(g, i * gsz, m, n);
                let av = MatView::row_major(ad, i * asz, ar, ac);
                let aeff = if ta { av.t() } else { av };
                if tb {
                    // b stores B^T, so db = dC^T A
                    gemm(gv.t(), aeff, gb, i * bsz, true);
                } else {
                    gemm(aeff.t(), gv, gb, i * bsz, true);
                }
            }
        });
    }

    fn backward_layer_norm(&mut self, x: usize, gamma: usize, beta: usize, eps: f64, g: &[S]) {
        let width = self.val(gamma).numel();
        self.accumulate(beta, |_, gb| {
            for row in g.chunks(width) {
                add_into(gb, row);
            }
        });
        self.accumulate(gamma, |t, gg| {
            for (src, gr) in t.val(x).data().chunks(width).zip(g.chunks(width)) {
                let (mean, rstd) = row_stats(src, eps);
                for j in 0..width {
                    gg[j] += gr[j] * (src[j] - mean) * rstd;
                }
            }
        });
        self.accumulate(x, |t, gx| {
            let gam = t.val(gamma).data();
            let w = S::from_usize(width).unwrap();
            let mut dxhat = vec![S::zero(); width];
            for ((src, gr), dr) in t.val(x).data().chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
                let (mean, rstd) = row_stats(src, eps);
                let mut mean_d = S::zero();
                let mut mean_dx = S::zero();
                for j in 0..width {
                    dxhat[j] = gr[j] * gam[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * (src[j] - mean) * rstd;
                }
                mean_d /= w;
                mean_dx /= w;
                for j in 0..width {
                    let xhat = (src[j] - mean) * rstd;
                    dr[j] += rstd * (dxhat[j] - mean_d - xhat * mean_dx);
                }
            }
        });
    }
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn tanh<S: Scalar>(u: S) -> S {
    let two = S::one() + S::one();
    S::one() - two / ((two * u).exp() + S::one())
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
}

fn row_stats<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let n = S::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + S::from_f64c(eps)).sqrt())
}

fn log_softmax_at<S: Scalar>(row: &[S], index: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    row[index] - max - total.ln()
}
