//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are read from a borrowed [`ParamStore`]; [`Graph::backward`] walks the tape
//! in reverse and returns per-parameter [`Gradients`].

use std::collections::HashMap;

use super::activations::sigmoid;
use super::kernels::{self, ConvDims};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability clamp applied inside the losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatVec {
        a: Var,
        x: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    Softmax {
        src: Var,
        mask: Option<Vec<bool>>,
    },
    Conv2d {
        input: Var,
        filters: Var,
        bias: Var,
        dims: ConvDims,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    BceSum {
        p: Var,
        targets: Vec<Option<T>>,
        scale: T,
    },
    CeSum {
        probs: Var,
        classes: Vec<Option<usize>>,
        scale: T,
    },
    Sum(Vec<Var>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Stack(_) => "stack",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::BceSum { .. } => "bce",
            Op::CeSum { .. } => "ce",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<T> {
    /// `None` for parameters, whose values live in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    non_finite: Option<(usize, &'static str)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            non_finite: None,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Errors if any recorded operation produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite(format!("{op} (node {node})"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `a[m×k] · b[k×n]`; a rank-1 `a` is treated as a single row and the
    /// result is rank-1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, row) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::shape("matmul", format!("lhs {sa:?}"))),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if row { vec![n] } else { vec![m, n] };
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[m×k] · x[k]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a).to_vec(), self.shape(x).to_vec());
        let (m, k) = match (sa.as_slice(), sx.as_slice()) {
            ([m, k], [kx]) if k == kx => (*m, *k),
            _ => return Err(Error::shape("matvec", format!("{sa:?} x {sx:?}"))),
        };
        let (av, xv) = (self.value(a).data(), self.value(x).data());
        let out: Vec<T> = (0..m)
            .map(|i| {
                av[i * k..][..k]
                    .iter()
                    .zip(xv)
                    .fold(T::zero(), |acc, (&p, &q)| acc + p * q)
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec { a, x }, &[a, x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut t = self.value(a).clone();
        for (x, &y) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `row[d]` to every row of `a[n×d]` (or to a rank-1 `a[d]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [d] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let mut t = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in t.data_mut().chunks_mut(d.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        Ok(self.push(t, Op::AddRow { a, row }, &[a, row]))
    }

    /// `x · w + b` for a rank-1 `x`, or row-wise for a rank-2 `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Error::shape("concat", format!("part {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Contiguous range of the flattened data, as a rank-1 tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let data = self.value(src).data();
        if start + len > data.len() {
            return Err(Error::shape(
                "slice",
                format!("{}..{} of {}", start, start + len, data.len()),
            ));
        }
        let t = Tensor::vector(data[start..start + len].to_vec());
        Ok(self.push(t, Op::Slice { src, start }, &[src]))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(src).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(src), &[src]))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let d = rows
            .first()
            .map(|r| self.value(*r).len())
            .ok_or_else(|| Error::shape("stack", "no rows"))?;
        let mut data = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.len() != d {
                return Err(Error::shape("stack", format!("row of {} vs {}", t.len(), d)));
            }
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_vec(&[rows.len(), d], data)?;
        Ok(self.push(t, Op::Stack(rows.to_vec()), rows))
    }

    /// Softmax of a vector; masked-out entries (mask `false`) get probability 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::shape("softmax", format!("{:?}", xv.shape())));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("softmax", "mask length"));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let max = (0..xv.len())
            .filter(|&i| keep(i))
            .map(|i| xv.data()[i])
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or_else(|| Error::shape("softmax", "every entry is masked"))?;
        let mut out: Vec<T> = (0..xv.len())
            .map(|i| {
                if keep(i) {
                    (xv.data()[i] - max).exp()
                } else {
                    T::zero()
                }
            })
            .collect();
        let sum = out.iter().fold(T::zero(), |a, &b| a + b);
        out.iter_mut().for_each(|v| *v = *v / sum);
        let op = Op::Softmax {
            src: x,
            mask: mask.map(|m| m.to_vec()),
        };
        Ok(self.push(Tensor::vector(out), op, &[x]))
    }

    /// Same-padded stride-1 convolution of an `H×W×Cin` map with
    /// `k×k×Cin×Cout` filters plus a `Cout` bias.
    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (si, sf) = (self.shape(input).to_vec(), self.shape(filters).to_vec());
        let dims = match (si.as_slice(), sf.as_slice()) {
            ([h, w, c], [k1, k2, cf, co]) if k1 == k2 && k1 % 2 == 1 && c == cf => ConvDims {
                height: *h,
                width: *w,
                in_channels: *c,
                out_channels: *co,
                kernel: *k1,
            },
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {si:?} with filters {sf:?}"),
                ))
            }
        };
        if self.shape(bias) != [dims.out_channels] {
            return Err(Error::shape("conv2d", "bias length"));
        }
        let mut out = vec![T::zero(); dims.height * dims.width * dims.out_channels];
        kernels::conv2d_forward(
            self.value(input).data(),
            self.value(filters).data(),
            self.value(bias).data(),
            dims,
            &mut out,
        );
        let t = Tensor::from_vec(&[dims.height, dims.width, dims.out_channels], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                filters,
                bias,
                dims,
            },
            &[input, filters, bias],
        ))
    }

    /// 3×3, stride 2, same padding.
    pub fn maxpool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let [h, w, c] = s.as_slice() else {
            return Err(Error::shape("maxpool", format!("{s:?}")));
        };
        let (out, argmax, oh, ow) = kernels::maxpool_forward(self.value(input).data(), *h, *w, *c);
        let t = Tensor::from_vec(&[oh, ow, *c], out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `scale · Σ −[y ln p + (1−y) ln(1−p)]` over entries with a target,
    /// with `p` clamped to `[ε, 1−ε]`.
    pub fn bce_sum(&mut self, p: Var, targets: &[Option<T>], scale: T) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(Error::shape("bce", "targets length"));
        }
        let loss = pv
            .iter()
            .zip(targets)
            .filter_map(|(&p, y)| y.map(|y| bce(p, y)))
            .fold(T::zero(), |a, b| a + b);
        let op = Op::BceSum {
            p,
            targets: targets.to_vec(),
            scale,
        };
        Ok(self.push(Tensor::scalar(loss * scale), op, &[p]))
    }

    /// `scale · Σ −ln p[row, class]` over rows with a class, `p` clamped.
    pub fn ce_sum(&mut self, probs: Var, classes: &[Option<usize>], scale: T) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        let [rows, c] = s.as_slice() else {
            return Err(Error::shape("ce", format!("{s:?}")));
        };
        if *rows != classes.len() || classes.iter().flatten().any(|k| k >= c) {
            return Err(Error::shape("ce", "classes"));
        }
        let pv = self.value(probs).data();
        let loss = classes
            .iter()
            .enumerate()
            .filter_map(|(r, k)| k.map(|k| ce_term(pv[r * c + k])))
            .fold(T::zero(), |a, b| a + b);
        let op = Op::CeSum {
            probs,
            classes: classes.to_vec(),
            scale,
        };
        Ok(self.push(Tensor::scalar(loss * scale), op, &[probs]))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("sum", "no parts"))?;
        let mut t = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("sum", first, p)?;
            t.add_assign(self.value(p));
        }
        Ok(self.push(t, Op::Sum(parts.to_vec()), parts))
    }

    /// Fingerprint of every branch taken at a nondifferentiable point: relu
    /// input signs, pooling winners and probability clamps. Two evaluations
    /// with equal fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::BceSum { p, .. } | Op::CeSum { probs: p, .. } => {
                    for v in self.value(*p).data() {
                        inside_clamp(*v).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of a single-value `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must hold one value"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.value(v).len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(
        &self,
        idx: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g, self.store.value(*id).shape()),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let gi = &g[i * n..][..n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..][..n];
                            da[i * k + kk] +=
                                gi.iter().zip(brow).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        }
                    }
                });
                let av = self.value(*a).data();
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        let gi = &g[i * n..][..n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for (d, &gv) in db[kk * n..][..n].iter_mut().zip(gi) {
                                *d += aik * gv;
                            }
                        }
                    }
                });
            }
            Op::MatVec { a, x } => {
                let k = self.value(*x).len();
                let xv = self.value(*x).data();
                self.acc(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, &xk) in da[i * k..][..k].iter_mut().zip(xv) {
                            *d += gi * xk;
                        }
                    }
                });
                let av = self.value(*a).data();
                self.acc(grads, *x, |dx| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, &aik) in dx.iter_mut().zip(&av[i * k..][..k]) {
                            *d += aik * gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(grads, *v, |d| add_into(d, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *row, |d| {
                    let n = d.len();
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = y.unwrap().data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * yv[i] * (T::one() - yv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = y.unwrap().data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (T::one() - yv[i] * yv[i]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice { src, start } => {
                let start = *start;
                self.acc(grads, *src, |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::Reshape(src) => self.acc(grads, *src, |d| add_into(d, g)),
            Op::Stack(rows) => {
                let d_len = g.len() / rows.len();
                for (r, row) in rows.iter().enumerate() {
                    self.acc(grads, *row, |d| add_into(d, &g[r * d_len..][..d_len]));
                }
            }
            Op::Softmax { src, mask } => {
                let yv = y.unwrap().data();
                let dot = yv.iter().zip(g).fold(T::zero(), |s, (&p, &q)| s + p * q);
                self.acc(grads, *src, |d| {
                    for i in 0..d.len() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            d[i] += yv[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                filters,
                bias,
                dims,
            } => {
                let iv = self.value(*input).data();
                let fv = self.value(*filters).data();
                let mut gf = vec![T::zero(); fv.len()];
                let mut gb = vec![T::zero(); dims.out_channels];
                let mut gi = self
                    .wants(*input)
                    .then(|| vec![T::zero(); iv.len()]);
                kernels::conv2d_backward(iv, fv, g, *dims, &mut gf, &mut gb, gi.as_deref_mut());
                self.acc(grads, *filters, |d| add_into(d, &gf));
                self.acc(grads, *bias, |d| add_into(d, &gb));
                if let Some(gi) = gi {
                    self.acc(grads, *input, |d| add_into(d, &gi));
                }
            }
            Op::MaxPool { input, argmax } => {
                self.acc(grads, *input, |d| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src as usize] += gv;
                    }
                });
            }
            Op::BceSum { p, targets, scale } => {
                let pv = self.value(*p).data();
                let gs = g[0] * *scale;
                self.acc(grads, *p, |d| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            d[i] += gs * bce_grad(pv[i], *t);
                        }
                    }
                });
            }
            Op::CeSum {
                probs,
                classes,
                scale,
            } => {
                let pv = self.value(*probs).data();
                let c = pv.len() / classes.len().max(1);
                let gs = g[0] * *scale;
                self.acc(grads, *probs, |d| {
                    for (r, k) in classes.iter().enumerate() {
                        if let Some(k) = k {
                            d[r * c + k] += gs * ce_grad(pv[r * c + k]);
                        }
                    }
                });
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.acc(grads, *p, |d| add_into(d, g));
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn eps<T: Scalar>() -> T {
    T::from(PROB_EPS).unwrap()
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(eps()).min(T::one() - eps())
}

fn inside_clamp<T: Scalar>(p: T) -> bool {
    p > eps::<T>() && p < T::one() - eps()
}

/// Binary cross entropy of one prediction, `p` clamped to `[ε, 1−ε]`.
pub fn bce<T: Scalar>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

fn bce_grad<T: Scalar>(p: T, y: T) -> T {
    if inside_clamp(p) {
        -y / p + (T::one() - y) / (T::one() - p)
    } else {
        T::zero()
    }
}

/// `−ln p` with `p` clamped.
pub fn ce_term<T: Scalar>(p: T) -> T {
    -clamp_prob(p).ln()
}

fn ce_grad<T: Scalar>(p: T) -> T {
    if inside_clamp(p) {
        -T::one() / p
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        assert!((bce(0.5f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(1.0f64, 1.0) < 1e-6);
        assert!((ce_term(1.0f64 / 3.0) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_masking_and_errors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![1.0, 5.0, 2.0]));
        let s = g.softmax(x, Some(&[true, false, true])).unwrap();
        let v = g.value(s).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!(g.softmax(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn non_finite_values_are_reported() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![f64::INFINITY]));
        let y = g.input(Tensor::vector(vec![0.0]));
        g.mul(x, y).unwrap();
        let err = g.check_finite().unwrap_err().to_string();
        assert!(err.contains("input"), "{err}");
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let img = g.input(Tensor::zeros(&[4, 4, 2]));
        let f = g.input(Tensor::zeros(&[3, 3, 3, 1]));
        let bias = g.input(Tensor::zeros(&[1]));
        assert!(g.conv2d(img, f, bias).is_err());
        let even = g.input(Tensor::zeros(&[2, 2, 2, 1]));
        assert!(g.conv2d(img, even, bias).is_err());
    }
}
