//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive op in execution order. Each node keeps
//! its forward value and whatever the op needs for its local backward rule.
//! [`Graph::backward`] walks the tape in exact reverse recording order and
//! accumulates adjoints, so recurrent unrolls get backpropagation through time
//! for free: the same parameter node is simply consumed at every time step.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, ConvGeom};
use crate::numeric::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Hadamard,
}

/// Local backward rule for [`Graph::custom`]: given the input values, the
/// output value and the output adjoint, return one adjoint per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mae(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization, for the
/// caller to fold into running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl Graph {
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, self.shape(v), &[0, 0]))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            let name = match kind {
                Binary::Add => "add",
                Binary::Hadamard => "hadamard",
            };
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = match kind {
            Binary::Add => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect(),
            Binary::Hadamard => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect(),
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Hadamard, a, b)
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
        };
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean absolute error; the subgradient at zero residual is 0.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mae_loss", p.shape(), t.shape()));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mae(pred, target), rg))
    }

    /// Train-mode batch normalization over the rows of `x [batch × features]`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, f) = self.dims2("batchnorm", x)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        self.check_affine(x, gamma, beta, f)?;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; f];
        for row in xs.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in xs.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, f);
        let xhat = out.1;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out.0,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, f) = self.dims2("batchnorm", x)?;
        self.check_affine(x, gamma, beta, f)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape(
                "batchnorm",
                self.shape(x),
                &[running_mean.len()],
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, running_mean, &inv_std, f);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, f: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.value(p).len() != f {
                return Err(Error::shape("batchnorm", self.shape(x), self.shape(p)));
            }
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        f: usize,
    ) -> (Tensor, Vec<f64>) {
        let xs = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.data().chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        (
            Tensor::new(xs.shape().to_vec(), out).expect("same shape"),
            xhat,
        )
    }

    /// 2-D convolution of `x [N×C×H×W]` with `w [O×C×k×k]` and bias `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, c, h, wd], &[o, wc, k, k2]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        if wc != c || k != k2 || self.value(b).len() != o || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let (plen, pos) = (geom.patch_len(), geom.out_positions());
        let mut cols = vec![0.0; n * plen * pos];
        let mut out = vec![0.0; n * o * pos];
        {
            let (xv, wv, bv) = (
                self.value(x).data(),
                self.value(w).data(),
                self.value(b).data(),
            );
            let img_len = c * h * wd;
            for i in 0..n {
                let col = &mut cols[i * plen * pos..(i + 1) * plen * pos];
                kernels::im2col(&xv[i * img_len..(i + 1) * img_len], &geom, col);
                let dst = &mut out[i * o * pos..(i + 1) * o * pos];
                for (ch, row) in dst.chunks_mut(pos).enumerate() {
                    row.fill(bv[ch]);
                }
                kernels::matmul_acc(wv, col, dst, o, plen, pos);
            }
        }
        let shape = vec![n, o, geom.out_height(), geom.out_width()];
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Non-overlapping average pooling of `x [N×C×H×W]` by `factor`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape("avg_pool", &s, &[0, 0, 0, 0]));
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "pool factor {factor} does not divide {h}×{w}"
            )));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / factor) * wo + xx / factor] += src[y * w + xx] * norm;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], out)?,
            Op::AvgPool { x, factor },
            rg,
        ))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    Binary::Add => {
                        for v in [a, b] {
                            if let Some(s) = self.slot(grads, v) {
                                axpy(s, g, 1.0);
                            }
                        }
                    }
                    Binary::Hadamard => {
                        if let Some(s) = self.slot(grads, a) {
                            for ((s, gv), bv) in s.iter_mut().zip(g).zip(self.value(b).data()) {
                                *s += gv * bv;
                            }
                        }
                        if let Some(s) = self.slot(grads, b) {
                            for ((s, gv), av) in s.iter_mut().zip(g).zip(self.value(a).data()) {
                                *s += gv * av;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
                let n = self.value(*bias).len();
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, *c);
                }
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    match kind {
                        Unary::Sigmoid => {
                            for ((s, gv), yv) in s.iter_mut().zip(g).zip(y) {
                                *s += gv * yv * (1.0 - yv);
                            }
                        }
                        Unary::Tanh => {
                            for ((s, gv), yv) in s.iter_mut().zip(g).zip(y) {
                                *s += gv * (1.0 - yv * yv);
                            }
                        }
                        Unary::Relu => {
                            for ((s, gv), yv) in s.iter_mut().zip(g).zip(y) {
                                if *yv > 0.0 {
                                    *s += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if let Some(s) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            axpy(&mut s[o * chunk..(o + 1) * chunk], src, 1.0);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                if let Some(s) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut s[base..base + len * inner], src, 1.0);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mae(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let scale = g[0] / pv.len() as f64;
                let sign = |a: f64, b: f64| {
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(s) = self.slot(grads, *p) {
                    for ((s, a), b) in s.iter_mut().zip(pv).zip(tv) {
                        *s += scale * sign(*a, *b);
                    }
                }
                if let Some(s) = self.slot(grads, *t) {
                    for ((s, a), b) in s.iter_mut().zip(pv).zip(tv) {
                        *s -= scale * sign(*a, *b);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = g.len() / f;
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *beta) {
                    for row in g.chunks(f) {
                        axpy(s, row, 1.0);
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    if *batch_stats {
                        // dx = inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let mut sum_d = vec![0.0; f];
                        let mut sum_dh = vec![0.0; f];
                        for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let d = grow[j] * gam[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * hrow[j];
                            }
                        }
                        let nf = n as f64;
                        for ((srow, grow), hrow) in
                            s.chunks_mut(f).zip(g.chunks(f)).zip(xhat.chunks(f))
                        {
                            for j in 0..f {
                                let d = grow[j] * gam[j];
                                srow[j] +=
                                    inv_std[j] / nf * (nf * d - sum_d[j] - hrow[j] * sum_dh[j]);
                            }
                        }
                    } else {
                        for (srow, grow) in s.chunks_mut(f).zip(g.chunks(f)) {
                            for j in 0..f {
                                srow[j] += grow[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let (plen, pos) = (geom.patch_len(), geom.out_positions());
                if let Some(s) = self.slot(grads, *b) {
                    for gi in g.chunks(o * pos) {
                        for (ch, row) in gi.chunks(pos).enumerate() {
                            s[ch] += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for i in 0..n {
                        let gi = &g[i * o * pos..(i + 1) * o * pos];
                        let col = &cols[i * plen * pos..(i + 1) * plen * pos];
                        kernels::matmul_nt_acc(gi, col, s, o, pos, plen);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.value(*w).data();
                    let img_len = geom.channels * geom.height * geom.width;
                    let mut dcol = vec![0.0; plen * pos];
                    let s = self.slot(grads, *x).expect("requires grad");
                    for i in 0..n {
                        dcol.fill(0.0);
                        let gi = &g[i * o * pos..(i + 1) * o * pos];
                        kernels::matmul_tn_acc(wv, gi, &mut dcol, o, plen, pos);
                        kernels::col2im_acc(&dcol, geom, &mut s[i * img_len..(i + 1) * img_len]);
                    }
                }
            }
            Op::AvgPool { x, factor } => {
                let s_in = self.shape(*x).to_vec();
                let (h, w) = (s_in[2], s_in[3]);
                let (ho, wo) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as f64;
                if let Some(s) = self.slot(grads, *x) {
                    for plane in 0..s_in[0] * s_in[1] {
                        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let dst = &mut s[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] += src[(y / factor) * wo + xx / factor] * norm;
                            }
                        }
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let adj = backward(&ins, &node.value, &gt);
                if adj.len() != inputs.len() {
                    return Err(Error::invalid("custom backward returned wrong arity"));
                }
                for (v, a) in inputs.iter().zip(adj) {
                    if a.shape() != self.shape(*v) {
                        return Err(Error::shape("custom backward", self.shape(*v), a.shape()));
                    }
                    if let Some(s) = self.slot(grads, *v) {
                        axpy(s, a.data(), 1.0);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if `v` was not reached from the loss.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Writes parameter gradients into `store` (zeros for unreached parameters
    /// that were registered on the graph; untouched otherwise).
    pub fn write_to(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            let p = store.get_mut(id);
            let shape = p.value.shape().to_vec();
            let g = match self.raw(v) {
                Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
                None => Tensor::zeros(&shape),
            };
            p.grad = Some(g);
        }
    }

    /// Like [`Gradients::write_to`] but adds onto existing gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            let Some(g) = self.raw(v) else { continue };
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(existing) => axpy(existing.data_mut(), g, 1.0),
                None => {
                    p.grad =
                        Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape"))
                }
            }
        }
    }
}
