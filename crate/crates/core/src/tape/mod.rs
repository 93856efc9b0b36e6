//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node; node ids are therefore already a topological
//! order and [`Tape::backward`] is a single reverse sweep.

mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use kernels::ConvDims;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable parameter in a [`ParamStore`](crate::params::ParamStore).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving average with [`BN_MOMENTUM`].
    pub fn update(&mut self, batch: &BatchMoments) {
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.unbiased_var[c];
        }
    }
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a·x + b`
    ScaleShift(Var, f64),
    Exp(Var),
    Abs(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    /// `x[b, ..] ⊙ p[..]` for every leading index `b`.
    MulBroadcast(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    TimeConv { x: Var, w: Var, b: Var, stride: usize },
    TimeDeconv { x: Var, w: Var, b: Var, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: gradients of every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf created by [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, summed over every time the parameter was
    /// bound on the tape. Unused parameters get zeros.
    pub fn params(&self, lens: &[usize]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (o, v) in out[id.0].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits a `[B ×] C × T` shape into `(B, C, T, batched)`.
fn bct(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [c, t] => Ok((1, c, t, false)),
        [b, c, t] => Ok((b, c, t, true)),
        _ => Err(shape_err(op, format!("expected C × T or B × C × T, got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, false, "input")
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, true, "leaf")
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Result<Var> {
        self.push(value.clone(), Op::Param(id), true, "param")
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push(value, op, rg, name)
    }

    /// `scale · x + shift`
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, "scale_shift", |v| scale * v + shift, Op::ScaleShift(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, Op::Abs(x))
    }

    /// `max(0, x)`, with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// Multiplies every leading-axis slice of `x` elementwise by `p`
    /// (the gate's Hadamard product, shared across the batch).
    pub fn mul_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (&self.nodes[x.0].value, &self.nodes[p.0].value);
        if tx.shape().len() != tp.shape().len() + 1 || tx.shape()[1..] != *tp.shape() {
            return Err(shape_err("mul_broadcast", format!("{:?} vs {:?}", tx.shape(), tp.shape())));
        }
        let inner = tp.len();
        let data = tx
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(tp.data()).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(p);
        self.push(value, Op::MulBroadcast(x, p), rg, "mul_broadcast")
    }

    /// `x · Wᵀ + b` for `x: B × N`, `W: M × N`, `b: M`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (&[batch, n], &[m, nw]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("affine", format!("x {:?}, W {:?}", tx.shape(), tw.shape())));
        };
        if n != nw || tb.shape() != [m] {
            return Err(shape_err(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut y: Vec<f64> = (0..batch).flat_map(|_| tb.data().iter().copied()).collect();
        kernels::gemm(batch, n, m, tx.data(), (n, 1), tw.data(), (1, n), 1.0, &mut y, (m, 1));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![batch, m], y)?, Op::Affine { x, w, b }, rg, "affine")
    }

    /// Causal strided time convolution
    /// `y[j, t] = Σ_{p,i} x[i, stride·t − p] · w[j, i, p] + b[j]`
    /// with zero left padding; output length is `ceil(T / stride)`.
    ///
    /// `x` is `C_in × T` or `B × C_in × T`; `w` is `C_out × C_in × K`.
    pub fn time_conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("time_conv stride must be ≥ 1".into()));
        }
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (batch, c_in, t_in, batched) = bct("time_conv", tx.shape())?;
        let &[c_out, cw, k] = tw.shape() else {
            return Err(shape_err("time_conv", format!("weight {:?} is not C_out × C_in × K", tw.shape())));
        };
        if cw != c_in || tb.shape() != [c_out] {
            return Err(shape_err(
                "time_conv",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let t_out = t_in.div_ceil(stride);
        let dims = ConvDims { batch, c_in, c_out, k, stride, t_long: t_in, t_short: t_out };
        let y = kernels::conv_forward(&dims, tx.data(), tw.data(), tb.data());
        let shape = if batched { vec![batch, c_out, t_out] } else { vec![c_out, t_out] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(shape, y)?, Op::TimeConv { x, w, b, stride }, rg, "time_conv")
    }

    /// Transposed time convolution (the input-adjoint of [`Tape::time_conv`]
    /// plus bias), cropped on the right to `target_t`.
    ///
    /// `x` is `C_in × T` or `B × C_in × T`; `w` is `C_in × C_out × K`;
    /// `target_t` must lie in `[stride·(T−1)+1, stride·T + K − 1]`.
    pub fn time_deconv(&mut self, x: Var, w: Var, b: Var, stride: usize, target_t: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("time_deconv stride must be ≥ 1".into()));
        }
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (batch, c_in, t_in, batched) = bct("time_deconv", tx.shape())?;
        let &[cw, c_out, k] = tw.shape() else {
            return Err(shape_err("time_deconv", format!("weight {:?} is not C_in × C_out × K", tw.shape())));
        };
        if cw != c_in || tb.shape() != [c_out] {
            return Err(shape_err(
                "time_deconv",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (lo, hi) = (stride * (t_in - 1) + 1, stride * t_in + k - 1);
        if target_t < lo || target_t > hi {
            return Err(Error::InvalidArgument(format!(
                "time_deconv target length {target_t} outside attainable [{lo}, {hi}]"
            )));
        }
        let dims = ConvDims { batch, c_in, c_out, k, stride, t_long: target_t, t_short: t_in };
        let y = kernels::deconv_forward(&dims, tx.data(), tw.data(), tb.data());
        let shape = if batched { vec![batch, c_out, target_t] } else { vec![c_out, target_t] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(shape, y)?, Op::TimeDeconv { x, w, b, stride }, rg, "time_deconv")
    }

    /// Per-channel batch normalization of a `B × C × T` tensor.
    ///
    /// Train mode normalizes with the batch statistics (biased variance) and
    /// returns them so the caller can update `running`; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BatchNormStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let &[batch, ch, t] = tx.shape() else {
            return Err(shape_err("batch_norm", format!("expected B × C × T, got {:?}", tx.shape())));
        };
        if tg.shape() != [ch] || tb.shape() != [ch] || running.mean.len() != ch {
            return Err(shape_err(
                "batch_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let n = batch * t;
        let (mean, var, moments) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let (mean, var) = kernels::channel_moments(tx.data(), batch, ch, t);
                let unbiased_var = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let moments = BatchMoments { mean: mean.clone(), unbiased_var };
                (mean, var, Some(moments))
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut y = vec![0.0; tx.len()];
        for b in 0..batch {
            for c in 0..ch {
                let start = (b * ch + c) * t;
                for i in start..start + t {
                    let h = (tx.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = tg.data()[c] * h + tb.data()[c];
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, t], y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = mode == Mode::Train;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg, "batch_norm")?;
        Ok((v, moments))
    }

    /// `μ + exp(log_σ) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`. Gradients
    /// flow to `mu` and `log_sigma` only.
    pub fn reparameterize(&mut self, mu: Var, log_sigma: Var, rng: &mut RngStream) -> Result<Var> {
        let shape = self.shape(mu).to_vec();
        let n = shape.iter().product();
        let eps = Tensor::new(shape, rng.normals(n))?;
        self.reparameterize_with(mu, log_sigma, eps)
    }

    /// [`Tape::reparameterize`] with caller-supplied noise.
    pub fn reparameterize_with(&mut self, mu: Var, log_sigma: Var, eps: Tensor) -> Result<Var> {
        let eps = self.input(eps)?;
        let sigma = self.exp(log_sigma)?;
        let noise = self.mul(sigma, eps)?;
        self.add(mu, noise)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                if grads[i].is_some() {
                    params.push((id, i));
                }
            }
            if matches!(node.op, Op::Input | Op::Param(_)) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(slot);
            }
        };
        match node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                acc(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::ScaleShift(x, s) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(x).data();
                acc(x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *d += g;
                        } else if x < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(x).data();
                acc(x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(x).data();
                acc(x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x >= lo && x <= hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Reshape(x) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::MulBroadcast(x, p) => {
                let (vx, vp) = (val(x).data(), val(p).data());
                let inner = vp.len();
                acc(x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((d, g), p) in drow.iter_mut().zip(grow).zip(vp) {
                            *d += g * p;
                        }
                    }
                });
                acc(p, &mut |d| {
                    for (grow, xrow) in g.chunks(inner).zip(vx.chunks(inner)) {
                        for ((d, g), x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (val(x), val(w));
                let (batch, n, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                acc(x, &mut |d| kernels::gemm(batch, m, n, g, (m, 1), tw.data(), (n, 1), 1.0, d, (n, 1)));
                acc(w, &mut |d| kernels::gemm(m, batch, n, g, (1, m), tx.data(), (n, 1), 1.0, d, (n, 1)));
                acc(b, &mut |d| {
                    for row in g.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::TimeConv { x, w, b, stride } => {
                let (tx, tw) = (val(x), val(w));
                let (batch, c_in, t_in, _) = bct("time_conv", tx.shape())?;
                let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
                let dims = ConvDims { batch, c_in, c_out, k, stride, t_long: t_in, t_short: t_in.div_ceil(stride) };
                let mut dx = self.rg(x).then(|| vec![0.0; tx.len()]);
                let mut dw = self.rg(w).then(|| vec![0.0; tw.len()]);
                let mut db = self.rg(b).then(|| vec![0.0; c_out]);
                kernels::conv_backward(&dims, tx.data(), tw.data(), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                add_into(&mut acc, x, dx);
                add_into(&mut acc, w, dw);
                add_into(&mut acc, b, db);
            }
            Op::TimeDeconv { x, w, b, stride } => {
                let (tx, tw) = (val(x), val(w));
                let (batch, c_in, t_in, _) = bct("time_deconv", tx.shape())?;
                let (c_out, k) = (tw.shape()[1], tw.shape()[2]);
                let t_long = *node.value.shape().last().unwrap();
                let dims = ConvDims { batch, c_in, c_out, k, stride, t_long, t_short: t_in };
                let mut dx = self.rg(x).then(|| vec![0.0; tx.len()]);
                let mut dw = self.rg(w).then(|| vec![0.0; tw.len()]);
                let mut db = self.rg(b).then(|| vec![0.0; c_out]);
                kernels::deconv_backward(&dims, tx.data(), tw.data(), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                add_into(&mut acc, x, dx);
                add_into(&mut acc, w, dw);
                add_into(&mut acc, b, db);
            }
            Op::BatchNorm { x, gamma, beta, ref xhat, ref inv_std, train } => {
                let shape = node.value.shape();
                let (batch, ch, t) = (shape[0], shape[1], shape[2]);
                let gv = val(gamma).data();
                let n = (batch * t) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let s = (bi * ch + c) * t;
                        for i in s..s + t {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                acc(x, &mut |d| {
                    for bi in 0..batch {
                        for c in 0..ch {
                            let s = (bi * ch + c) * t;
                            let k = gv[c] * inv_std[c];
                            for i in s..s + t {
                                d[i] += if train {
                                    // dxhat summed terms are γ·dbeta and γ·dgamma.
                                    k * (g[i] - dbeta[c] / n - xhat[i] * dgamma[c] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
                add_into(&mut acc, gamma, Some(dgamma));
                add_into(&mut acc, beta, Some(dbeta));
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])), v: Var, delta: Option<Vec<f64>>) {
    if let Some(delta) = delta {
        acc(v, &mut |d| d.iter_mut().zip(&delta).for_each(|(d, x)| *d += x));
    }
}
