//! Recorded computation graph with reverse-mode gradients and forward-mode
//! Jacobian–vector products.
//!
//! Every op stores its value eagerly. Reverse mode walks the node list
//! backwards. Forward mode walks it forwards and emits the tangent of each
//! node as *new graph nodes*, so a tangent is itself an ordinary value that
//! reverse mode can differentiate (unless it is passed through
//! [`Graph::stop_gradient`]).

use std::collections::HashMap;

use super::params::ParameterSet;
use super::tensor::{
    broadcast_binary, conv2d_backward, conv2d_forward, expand_to, gemm_nn,
    gemm_nt, gemm_tn, inverse_permutation, permute, sum_to_shape, ConvGeom, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Expand(Var),
    Sin(Var),
    Cos(Var),
    Recip(Var),
    Sigmoid(Var),
    Silu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Conv2d { input: Var, weight: Var },
    AvgPool2(Var),
    Upsample2(Var),
    Softmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Expand(_) => "expand",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Recip(_) => "recip",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::Softmax(_) => "softmax",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::StopGrad => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Conv2d { input, weight } => vec![*input, *weight],
            Op::Concat(parts, _) => parts.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::Scale(a, _)
            | Op::Expand(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Softmax(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// (outer, len, inner) of `shape` split around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A differentiable leaf, not registered as a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A differentiable named leaf; [`Graph::grad`] reports its gradient.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push_leaf(value, true);
        self.params.push((name.into(), v));
        v
    }

    /// Registers every tensor of `params` as a named leaf.
    pub fn bind(&mut self, params: &ParameterSet, trainable: bool) -> HashMap<String, Var> {
        params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(name.clone(), t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = match op {
            Op::StopGrad => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // -----------------------------------------------------------------------
    // Ops

    /// Value-identical copy through which no gradient flows and whose
    /// forward-mode tangent is zero.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Broadcasts `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = expand_to(self.value(a), shape)?;
        self.push(Op::Expand(a), value)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sin);
        self.push(Op::Sin(a), value)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), value)
    }

    /// Elementwise `1/x`; a zero input is reported as non-finite.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// `x·σ(x)`, smooth everywhere.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), value)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(Error::invalid(format!("sum_axis: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push(Op::SumAxis(a, axis), value)
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    /// `[batch, m, k] · [batch, k, n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bt, m, n], out)?;
        self.push(Op::BatchMatMul(a, b), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = permute(self.value(a), axes)?;
        self.push(Op::Permute(a, axes.to_vec()), value)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                data.extend_from_slice(
                    &self.value(p).data()[o * len * inner..(o + 1) * len * inner],
                );
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(Op::Concat(parts.to_vec(), axis), value)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(Op::Slice { input: a, axis, start }, value)
    }

    /// Stride-1 "same" convolution of `[n, cin, h, w]` with `[cout, cin, k, k]` (k odd).
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let geom = self.conv_geom(input, weight)?;
        let data = conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(vec![geom.n, geom.cout, geom.h, geom.w], data)?;
        self.push(Op::Conv2d { input, weight }, value)
    }

    fn conv_geom(&self, input: Var, weight: Var) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(input), self.shape(weight));
        let ok = sx.len() == 4 && sw.len() == 4 && sw[1] == sx[1] && sw[2] == sw[3] && sw[2] % 2 == 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        Ok(ConvGeom {
            n: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
        })
    }

    /// 2×2 mean pooling over the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) || !s[s.len() - 2].is_multiple_of(2) {
            return Err(Error::invalid(format!("avg_pool2 needs even spatial dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = x.numel() / (h * w);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * ho * wo];
        let d = x.data();
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    let b = p * h * w + 2 * y * w + 2 * xx;
                    out[p * ho * wo + y * wo + xx] = 0.25 * (d[b] + d[b + 1] + d[b + w] + d[b + w + 1]);
                }
            }
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        let value = Tensor::new(shape, out)?;
        self.push(Op::AvgPool2(a), value)
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::invalid("upsample2 needs at least two axes"));
        }
        let value = upsample2_value(x)?;
        self.push(Op::Upsample2(a), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::Softmax(a), value)
    }

    // -----------------------------------------------------------------------
    // Reverse mode

    /// Back-propagates from the scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.pullback(i, &g)?;
            grads[i] = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` with respect to every named parameter (zero when unreached).
    pub fn grad(&self, loss: Var) -> Result<ParameterSet> {
        let grads = self.backward(loss)?;
        let mut out = ParameterSet::new();
        for (name, v) in &self.params {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to arbitrary nodes (zero when unreached).
    pub fn grad_wrt(&self, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)))
            })
            .collect())
    }

    fn pullback(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let out = match &node.op {
            Op::Leaf | Op::StopGrad => vec![],
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(g, val(*b).shape()).scale(-1.0)),
            ],
            Op::Mul(a, b) => {
                let mut v = Vec::new();
                if want(*a) {
                    let ga = broadcast_binary(g, val(*b), "mul", |x, y| x * y)?;
                    v.push((*a, sum_to_shape(&ga, val(*a).shape())));
                }
                if want(*b) {
                    let gb = broadcast_binary(g, val(*a), "mul", |x, y| x * y)?;
                    v.push((*b, sum_to_shape(&gb, val(*b).shape())));
                }
                v
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Expand(a) => vec![(*a, sum_to_shape(g, val(*a).shape()))],
            Op::Sin(a) => vec![(*a, g.zip_map(val(*a), "sin", |gv, x| gv * x.cos())?)],
            Op::Cos(a) => vec![(*a, g.zip_map(val(*a), "cos", |gv, x| -gv * x.sin())?)],
            Op::Recip(a) => vec![(*a, g.zip_map(&node.value, "recip", |gv, y| -gv * y * y)?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?)],
            Op::Silu(a) => vec![(*a, g.zip_map(val(*a), "silu", |gv, x| gv * silu_prime(x))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::SumAxis(a, _) => vec![(*a, expand_to(g, val(*a).shape())?)],
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut v = Vec::new();
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), val(*b).data(), &mut ga, m, k, n);
                    v.push((*a, Tensor::new(sa.to_vec(), ga)?));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(*a).data(), g.data(), &mut gb, m, k, n);
                    v.push((*b, Tensor::new(sb.to_vec(), gb)?));
                }
                v
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db, dg) = (val(*a).data(), val(*b).data(), g.data());
                let mut v = Vec::new();
                if want(*a) {
                    let mut ga = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        gemm_nt(
                            &dg[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    v.push((*a, Tensor::new(sa.to_vec(), ga)?));
                }
                if want(*b) {
                    let mut gb = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        gemm_tn(
                            &da[i * m * k..(i + 1) * m * k],
                            &dg[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    v.push((*b, Tensor::new(sb.to_vec(), gb)?));
                }
                v
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Permute(a, axes) => vec![(*a, permute(g, &inverse_permutation(axes))?)],
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    v.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                }
                v
            }
            Op::Slice { input, axis, start } => {
                let full_shape = val(*input).shape();
                let (outer, full, inner) = split_axis(full_shape, *axis);
                let len = g.shape()[*axis];
                let mut gi = Tensor::zeros(full_shape);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gi.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::Conv2d { input, weight } => {
                let geom = self.conv_geom(*input, *weight)?;
                let (dx, dw) = conv2d_backward(
                    val(*input).data(),
                    val(*weight).data(),
                    g.data(),
                    &geom,
                    want(*input),
                    want(*weight),
                );
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((*input, Tensor::new(val(*input).shape().to_vec(), dx)?));
                }
                if let Some(dw) = dw {
                    v.push((*weight, Tensor::new(val(*weight).shape().to_vec(), dw)?));
                }
                v
            }
            Op::AvgPool2(a) => {
                let up = upsample2_value(g)?;
                vec![(*a, up.scale(0.25))]
            }
            Op::Upsample2(a) => {
                let s = val(*a).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = val(*a).numel() / (h * w);
                let mut out = vec![0.0; planes * h * w];
                let d = g.data();
                for p in 0..planes {
                    for y in 0..h {
                        for x in 0..w {
                            let b = p * 4 * h * w + 2 * y * 2 * w + 2 * x;
                            out[p * h * w + y * w + x] = d[b] + d[b + 1] + d[b + 2 * w] + d[b + 2 * w + 1];
                        }
                    }
                }
                vec![(*a, Tensor::new(s.to_vec(), out)?)]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut out = vec![0.0; y.numel()];
                for ((orow, yrow), grow) in out
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), out)?)]
            }
        };
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Forward mode

    /// Evaluates `f` and its directional derivative along `tangents`.
    ///
    /// `inputs` must already live in this graph; `f` records its ops on the
    /// graph and returns the output node. The tangent output is built from
    /// ordinary graph ops, so it is reverse-differentiable in turn.
    pub fn jvp<F>(&mut self, inputs: &[Var], tangents: &[Var], f: F) -> Result<(Var, Var)>
    where
        F: FnOnce(&mut Graph) -> Result<Var>,
    {
        if inputs.len() != tangents.len() {
            return Err(Error::invalid(format!(
                "jvp: {} inputs but {} tangents",
                inputs.len(),
                tangents.len()
            )));
        }
        for (&x, &dx) in inputs.iter().zip(tangents) {
            if self.shape(x) != self.shape(dx) {
                return Err(Error::ShapeMismatch {
                    op: "jvp",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(dx).to_vec(),
                });
            }
        }
        let out = f(self)?;
        let tangent = self.pushforward(inputs, tangents, out)?;
        Ok((out, tangent))
    }

    /// Forward-mode sweep from `inputs` (seeded with `tangents`) to `output`.
    pub fn pushforward(&mut self, inputs: &[Var], tangents: &[Var], output: Var) -> Result<Var> {
        let mut tan: HashMap<usize, Var> = HashMap::new();
        for (&x, &dx) in inputs.iter().zip(tangents) {
            if !self.is_zero_constant(dx) {
                tan.insert(x.0, dx);
            }
        }
        let Some(start) = tan.keys().copied().min() else {
            return Ok(self.constant(Tensor::zeros(self.shape(output))));
        };
        for i in start..=output.0 {
            if tan.contains_key(&i) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Some(t) = self.tangent_rule(Var(i), &op, &tan)? {
                tan.insert(i, t);
            }
        }
        Ok(match tan.get(&output.0) {
            Some(&t) => t,
            None => self.constant(Tensor::zeros(self.shape(output))),
        })
    }

    fn is_zero_constant(&self, v: Var) -> bool {
        let n = &self.nodes[v.0];
        matches!(n.op, Op::Leaf) && !n.needs_grad && n.value.data().iter().all(|&x| x == 0.0)
    }

    fn fit_to(&mut self, t: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(t) == shape {
            Ok(t)
        } else {
            self.expand(t, shape)
        }
    }

    fn tangent_rule(&mut self, node: Var, op: &Op, tan: &HashMap<usize, Var>) -> Result<Option<Var>> {
        let t = |v: &Var| tan.get(&v.0).copied();
        let out_shape = self.shape(node).to_vec();
        let r = match op {
            Op::Leaf | Op::StopGrad => None,
            Op::Add(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(self.fit_to(x, &out_shape)?),
                (Some(x), Some(y)) => {
                    let s = self.add(x, y)?;
                    Some(self.fit_to(s, &out_shape)?)
                }
            },
            Op::Sub(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) => Some(self.fit_to(x, &out_shape)?),
                (None, Some(y)) => {
                    let n = self.neg(y)?;
                    Some(self.fit_to(n, &out_shape)?)
                }
                (Some(x), Some(y)) => {
                    let s = self.sub(x, y)?;
                    Some(self.fit_to(s, &out_shape)?)
                }
            },
            Op::Mul(a, b) => {
                let left = match t(a) {
                    Some(ta) => Some(self.mul(ta, *b)?),
                    None => None,
                };
                let right = match t(b) {
                    Some(tb) => Some(self.mul(*a, tb)?),
                    None => None,
                };
                match (left, right) {
                    (None, None) => None,
                    (Some(x), None) | (None, Some(x)) => Some(self.fit_to(x, &out_shape)?),
                    (Some(x), Some(y)) => {
                        let s = self.add(x, y)?;
                        Some(self.fit_to(s, &out_shape)?)
                    }
                }
            }
            Op::Scale(a, c) => match t(a) {
                Some(ta) => Some(self.scale(ta, *c)?),
                None => None,
            },
            Op::Expand(a) => match t(a) {
                Some(ta) => Some(self.expand(ta, &out_shape)?),
                None => None,
            },
            Op::Sin(a) => match t(a) {
                Some(ta) => {
                    let c = self.cos(*a)?;
                    Some(self.mul(c, ta)?)
                }
                None => None,
            },
            Op::Cos(a) => match t(a) {
                Some(ta) => {
                    let s = self.sin(*a)?;
                    let p = self.mul(s, ta)?;
                    Some(self.neg(p)?)
                }
                None => None,
            },
            Op::Recip(a) => match t(a) {
                Some(ta) => {
                    let y2 = self.mul(node, node)?;
                    let d = self.mul(y2, ta)?;
                    Some(self.neg(d)?)
                }
                None => None,
            },
            Op::Sigmoid(a) => match t(a) {
                Some(ta) => {
                    let one = self.scalar(1.0);
                    let om = self.sub(one, node)?;
                    let d = self.mul(node, om)?;
                    Some(self.mul(d, ta)?)
                }
                None => None,
            },
            Op::Silu(a) => match t(a) {
                Some(ta) => {
                    // silu'(x) = s·(1 + x·(1 − s)), s = σ(x)
                    let s = self.sigmoid(*a)?;
                    let one = self.scalar(1.0);
                    let om = self.sub(one, s)?;
                    let xom = self.mul(*a, om)?;
                    let inner = self.add(one, xom)?;
                    let d = self.mul(s, inner)?;
                    Some(self.mul(d, ta)?)
                }
                None => None,
            },
            Op::Sum(a) => match t(a) {
                Some(ta) => Some(self.sum(ta)?),
                None => None,
            },
            Op::SumAxis(a, axis) => match t(a) {
                Some(ta) => Some(self.sum_axis(ta, *axis)?),
                None => None,
            },
            Op::MatMul(a, b) => self.bilinear(t(a), t(b), *a, *b, Graph::matmul)?,
            Op::BatchMatMul(a, b) => self.bilinear(t(a), t(b), *a, *b, Graph::batch_matmul)?,
            Op::Conv2d { input, weight } => {
                self.bilinear(t(input), t(weight), *input, *weight, Graph::conv2d)?
            }
            Op::Reshape(a) => match t(a) {
                Some(ta) => Some(self.reshape(ta, &out_shape)?),
                None => None,
            },
            Op::Permute(a, axes) => match t(a) {
                Some(ta) => Some(self.permute(ta, axes)?),
                None => None,
            },
            Op::Concat(parts, axis) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    None
                } else {
                    let mut tparts = Vec::with_capacity(parts.len());
                    for p in parts {
                        let tp = match t(p) {
                            Some(tp) => tp,
                            None => {
                                let z = Tensor::zeros(self.shape(*p));
                                self.constant(z)
                            }
                        };
                        tparts.push(tp);
                    }
                    Some(self.concat(&tparts, *axis)?)
                }
            }
            Op::Slice { input, axis, start } => match t(input) {
                Some(ti) => Some(self.slice(ti, *axis, *start, out_shape[*axis])?),
                None => None,
            },
            Op::AvgPool2(a) => match t(a) {
                Some(ta) => Some(self.avg_pool2(ta)?),
                None => None,
            },
            Op::Upsample2(a) => match t(a) {
                Some(ta) => Some(self.upsample2(ta)?),
                None => None,
            },
            Op::Softmax(a) => match t(a) {
                Some(ta) => {
                    // dy = y ⊙ (dx − Σ_last(y ⊙ dx))
                    let yd = self.mul(node, ta)?;
                    let last = out_shape.len() - 1;
                    let s = self.sum_axis(yd, last)?;
                    let diff = self.sub(ta, s)?;
                    Some(self.mul(node, diff)?)
                }
                None => None,
            },
        };
        Ok(r)
    }

    fn bilinear(
        &mut self,
        ta: Option<Var>,
        tb: Option<Var>,
        a: Var,
        b: Var,
        op: fn(&mut Graph, Var, Var) -> Result<Var>,
    ) -> Result<Option<Var>> {
        let left = match ta {
            Some(ta) => Some(op(self, ta, b)?),
            None => None,
        };
        let right = match tb {
            Some(tb) => Some(op(self, a, tb)?),
            None => None,
        };
        Ok(match (left, right) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x),
            (Some(x), Some(y)) => Some(self.add(x, y)?),
        })
    }
}

fn upsample2_value(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let mut out = vec![0.0; planes * 4 * h * w];
    let d = x.data();
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[p * 4 * h * w + y * 2 * w + xx] = d[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    let mut shape = s.to_vec();
    let nd = shape.len();
    shape[nd - 2] = 2 * h;
    shape[nd - 1] = 2 * w;
    Tensor::new(shape, out)
}

/// Evaluates `f` at `inputs` and its derivative along `tangents` on a fresh graph.
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let ts: Vec<Var> = tangents.iter().map(|t| g.constant(t.clone())).collect();
    let (y, dy) = g.jvp(&xs, &ts, |g| f(g, &xs))?;
    Ok((g.value(y).clone(), g.value(dy).clone()))
}
