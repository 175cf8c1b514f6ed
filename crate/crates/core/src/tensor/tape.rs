use std::collections::HashMap;

use rand::Rng;

use super::{numel, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MaskedSoftmax(Var, Vec<bool>),
    MaskedLogSoftmax(Var, Vec<bool>),
    CrossEntropy { logprobs: Var, target: usize },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Row { x: Var, index: usize },
    BroadcastRows(Var),
    MulConst(Var, Vec<T>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so every input of a node sits at a
/// lower index and reverse iteration is a valid backward schedule. A tape is a
/// single-writer value; distinct tapes share nothing and may live on distinct
/// threads.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

/// (rows, last) view used by row-wise operations.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    (numel(shape) / last.max(1), last)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well formed")
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(shape_err("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = numel(&shape);
        self.push(shape, vec![T::zero(); n], Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bound.insert(id, v);
        v
    }

    /// Parameter bindings created through [`Tape::param`].
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k, n) = match (dims2(sa), dims2(sb)) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o = *o + aik * bkj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Scalar-with-tensor product, the only broadcast the engine performs.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    fn check_mask(&self, a: Var, mask: &[bool]) -> Result<(usize, usize)> {
        let (rows, n) = rows_last(self.shape(a));
        if mask.len() != rows * n {
            return Err(shape_err("mask", self.shape(a), &[mask.len()]));
        }
        if mask.chunks(n).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::DegenerateMask);
        }
        Ok((rows, n))
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, n) = self.check_mask(a, mask)?;
        let out = masked_softmax_values(self.value(a), mask, n);
        let rg = self.rg(a);
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::MaskedSoftmax(a, mask.to_vec()),
            rg,
        ))
    }

    /// Log of [`Tape::masked_softmax`]; masked positions hold `-inf` and never
    /// receive gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, n) = self.check_mask(a, mask)?;
        let x = self.value(a);
        let mut out = vec![T::neg_infinity(); x.len()];
        for ((row, mrow), orow) in x.chunks(n).zip(mask.chunks(n)).zip(out.chunks_mut(n)) {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let sum: T = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            for ((o, &v), &m) in orow.iter_mut().zip(row).zip(mrow) {
                if m {
                    *o = v - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::MaskedLogSoftmax(a, mask.to_vec()),
            rg,
        ))
    }

    /// Negative log-likelihood of `target` under a vector of log-probabilities.
    pub fn cross_entropy(&mut self, logprobs: Var, target: usize) -> Result<Var> {
        let n = self.nodes[logprobs.0].value.len();
        let (rows, _) = rows_last(self.shape(logprobs));
        if rows != 1 {
            return Err(Error::Contract(format!(
                "cross_entropy expects a single distribution, got shape {:?}",
                self.shape(logprobs)
            )));
        }
        if target >= n {
            return Err(Error::Index { index: target, len: n });
        }
        let v = -self.value(logprobs)[target];
        let rg = self.rg(logprobs);
        Ok(self.push(Vec::new(), vec![v], Op::CrossEntropy { logprobs, target }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index { index: axis, len: base.len() });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V × d]` table; the result is `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table))
            .ok_or_else(|| shape_err("embedding", self.shape(table), &[]))?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, len: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, n) = rows_last(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::lit(LN_EPS);
        let nn = T::lit(n as f64);
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a)).ok_or_else(|| shape_err("transpose", self.shape(a), &[]))?;
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a)).ok_or_else(|| shape_err("slice_cols", self.shape(a), &[]))?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                index: start + len,
                len: c,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: a, start }, rg))
    }

    /// Row `index` of a 2-D tensor as a `[1 × cols]` tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a)).ok_or_else(|| shape_err("row", self.shape(a), &[]))?;
        if index >= r {
            return Err(Error::Index { index, len: r });
        }
        let out = self.value(a)[index * c..(index + 1) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![1, c], out, Op::Row { x: a, index }, rg))
    }

    /// Explicitly tiles a `[n]` or `[1 × n]` tensor into `rows` copies.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let n = match *self.shape(a) {
            [n] | [1, n] => n,
            _ => return Err(shape_err("broadcast_rows", self.shape(a), &[1, 0])),
        };
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(av);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, n], out, Op::BroadcastRows(a), rg))
    }

    /// Element-wise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c), rg))
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {rate} not in [0,1)")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are returned rather than written into parameters; use
    /// [`ParamStore::accumulate`] to add them to the stored tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bv[kk * n + j];
                            }
                            ga[i * k + kk] = ga[i * k + kk] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                gb[kk * n + j] = gb[kk * n + j] + aik * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y * *c;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &y), &s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x = *x + y * s * (T::one() - s);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, &y), &t) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x = *x + y * (T::one() - t * t);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(&node.value) {
                    if o > T::zero() {
                        *x = *x + y;
                    }
                }
            }),
            Op::MaskedSoftmax(a, mask) => {
                let (_, n) = rows_last(&node.shape);
                acc(*a, &mut |ga| {
                    for r in 0..node.value.len() / n {
                        let ys = &node.value[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: T = ys.iter().zip(gs).map(|(&y, &gg)| y * gg).sum();
                        for j in 0..n {
                            if mask[r * n + j] {
                                ga[r * n + j] = ga[r * n + j] + ys[j] * (gs[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let (_, n) = rows_last(&node.shape);
                acc(*a, &mut |ga| {
                    for r in 0..node.value.len() / n {
                        let lp = &node.value[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let m = &mask[r * n..(r + 1) * n];
                        let gsum: T = gs.iter().zip(m).filter(|(_, &l)| l).map(|(&x, _)| x).sum();
                        for j in 0..n {
                            if m[j] {
                                ga[r * n + j] = ga[r * n + j] + gs[j] - lp[j].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logprobs, target } => acc(*logprobs, &mut |ga| {
                ga[*target] = ga[*target] - g[0];
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (_, n) = rows_last(&node.shape);
                let nn = T::lit(n as f64);
                let gv = val(*gain);
                acc(*gain, &mut |gg| {
                    for (r, gr) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<T> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() / nn;
                        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nn;
                        for j in 0..n {
                            let v = rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            gx[r * n + j] = gx[r * n + j] + v;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a)).unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.shape(*x)).unwrap();
                let len = node.shape[1];
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::Row { x, index } => {
                let c = node.shape[1];
                acc(*x, &mut |gx| add_into(&mut gx[index * c..(index + 1) * c], g));
            }
            Op::BroadcastRows(a) => {
                let n = node.shape[1];
                acc(*a, &mut |ga| {
                    for gr in g.chunks(n) {
                        add_into(ga, gr);
                    }
                });
            }
            Op::MulConst(a, c) => acc(*a, &mut |ga| {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * c[i];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Max-subtracted softmax over each length-`n` row, restricted to live
/// positions.
pub(crate) fn masked_softmax_values<T: Scalar>(x: &[T], mask: &[bool], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ((row, mrow), orow) in x.chunks(n).zip(mask.chunks(n)).zip(out.chunks_mut(n)) {
        let max = row
            .iter()
            .zip(mrow)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for ((o, &v), &m) in orow.iter_mut().zip(row).zip(mrow) {
            if m {
                *o = (v - max).exp();
                sum = sum + *o;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}
