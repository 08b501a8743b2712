//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Handles ([`Var`]) are plain indices into the tape,
//! so a graph is built fresh for every forward pass and dropped afterwards.

use super::attention::{attend, attend_backward, AttnShape, Mask};
use super::tensor::{axpy, mm_acc, mm_nt_acc, mm_tn_acc, Float, Tensor};
use super::NumericsError;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Map(Var, fn(T) -> T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<T>, count: usize },
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, mask: Mask, probs: Vec<T> },
}

/// Differentiation tape.
pub struct Graph<T: Float = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Res = Result<Var, NumericsError>;

fn check_finite<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(), NumericsError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn dims2<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(NumericsError::Shape { op, left: s.to_vec(), right: vec![] }),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let c = T::cst(GELU_C);
    let a = T::cst(GELU_A);
    let half = T::cst(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::cst(GELU_C);
    let a = T::cst(GELU_A);
    let half = T::cst(0.5);
    let three = T::cst(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool, name: &'static str) -> Res {
        check_finite(&value, name)?;
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    /// Records a leaf tensor. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Res {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Res {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient; `None` if the tensor does not require one or the
    /// backward pass never reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if self.requires[v.0] {
            self.grads[v.0].as_deref()
        } else {
            None
        }
    }

    /// Gradient of a tensor that requires one, zeros if it was unreachable.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); self.values[v.0].len()])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (n, k) = dims2(self.value(a), "matmul")?;
        let (k2, m) = dims2(self.value(b), "matmul")?;
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let req = self.requires[a.0] || self.requires[b.0];
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), req, "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Res {
        let (n, k) = dims2(self.value(a), "matmul_nt")?;
        let (m, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let req = self.requires[a.0] || self.requires[b.0];
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT(a, b), req, "matmul_nt")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        self.push(t, Op::Add(a, b), req, "add")
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Res {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(NumericsError::Shape {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(cols).flat_map(|r| r.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires[a.0] || self.requires[bias.0];
        self.push(t, Op::AddBias(a, bias), req, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        self.push(t, Op::Mul(a, b), req, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Res {
        let t = self.value(a).map(|x| x * s);
        let req = self.requires[a.0];
        self.push(t, Op::Scale(a, s), req, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Res {
        let t = self.value(a).map(gelu);
        let req = self.requires[a.0];
        self.push(t, Op::Gelu(a), req, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Res {
        let t = self.value(a).map(|x| x.tanh());
        let req = self.requires[a.0];
        self.push(t, Op::Tanh(a), req, "tanh")
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, a: Var, f: fn(T) -> T, df: fn(T) -> T) -> Res {
        let t = self.value(a).map(f);
        let req = self.requires[a.0];
        self.push(t, Op::Map(a, df), req, "map")
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res {
        let (n, d) = dims2(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::cst(eps);
        let dn = T::cst(d as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, req, "layer_norm")
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Res {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax" });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (src[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let req = self.requires[x.0];
        self.push(t, Op::Softmax { x, axis }, req, "softmax")
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Res {
        let (v, d) = dims2(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(NumericsError::EmptyAxis { op: "embedding" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::IndexOutOfRange { op: "embedding", index: bad, limit: v });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let req = self.requires[table.0];
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, req, "embedding")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Res {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.shape().len() > 2 {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), req, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Res {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), req, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Res {
        let (n, d) = dims2(self.value(x), "slice_rows")?;
        if len == 0 || start + len > n {
            return Err(NumericsError::IndexOutOfRange { op: "slice_rows", index: start + len, limit: n });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let req = self.requires[x.0];
        self.push(Tensor::new(vec![len, d], data)?, Op::SliceRows { x, start }, req, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Res {
        let (n, d) = dims2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(NumericsError::IndexOutOfRange { op: "slice_cols", index: start + len, limit: d });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let req = self.requires[x.0];
        self.push(Tensor::new(vec![n, len], data)?, Op::SliceCols { x, start }, req, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res {
        let t = self.value(x).clone().reshaped(shape)?;
        let req = self.requires[x.0];
        self.push(t, Op::Reshape(x), req, "reshape")
    }

    /// Mean token-level negative log-likelihood over positions whose target is
    /// not `pad`. Returns a one-element tensor (zero if every target is padding).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Res {
        let (n, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: bad, limit: v });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0;
        for i in 0..n {
            let row = &z[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p = *p / sum;
            }
            if targets[i] != pad {
                total += sum.ln() + mx - row[targets[i]];
                count += 1;
            }
        }
        let loss = if count > 0 { total / T::cst(count as f64) } else { T::zero() };
        let req = self.requires[logits.0];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count },
            req,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Res {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), req, "sum")
    }

    /// Multi-head attention of `q` (n × d) over keys `k` and values `v` (s × d).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Res {
        let (n, d) = dims2(self.value(q), "attention")?;
        let (s, dk) = dims2(self.value(k), "attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(NumericsError::Shape { op: "attention", left: self.shape(q).to_vec(), right: self.shape(k).to_vec() });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Invalid(format!("{heads} heads do not divide width {d}")));
        }
        let shape = AttnShape { n, s, d, heads };
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); heads * n * s];
        attend(self.value(q).data(), self.value(k).data(), self.value(v).data(), shape, mask, &mut out, &mut probs);
        let t = Tensor::new(vec![n, d], out)?;
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        self.push(t, Op::Attention { q, k, v, shape, mask, probs }, req, "attention")
    }

    /// Backpropagates from a one-element tensor, accumulating into every
    /// reachable tensor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.values[loss.0].len() != 1 {
            return Err(NumericsError::Shape { op: "backward", left: self.shape(loss).to_vec(), right: vec![1] });
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        ensure(&mut self.grads, &self.values, loss)[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            for v in op_inputs(&op) {
                if self.requires[v.0] {
                    ensure(&mut self.grads, &self.values, v);
                }
            }
            self.backward_op(i, &op, &g);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite { op: op_name(&self.ops[i]) });
                }
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        let Graph { values, grads, requires, .. } = self;
        let req = |v: &Var| requires[v.0];
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(&values[a.0], "").unwrap();
                let m = values[b.0].cols();
                if req(a) {
                    mm_nt_acc(g, values[b.0].data(), gr(grads, *a), n, m, k);
                }
                if req(b) {
                    mm_tn_acc(values[a.0].data(), g, gr(grads, *b), n, k, m);
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = dims2(&values[a.0], "").unwrap();
                let m = values[b.0].rows();
                if req(a) {
                    mm_acc(g, values[b.0].data(), gr(grads, *a), n, m, k);
                }
                if req(b) {
                    mm_tn_acc(g, values[a.0].data(), gr(grads, *b), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if req(v) {
                        axpy(T::one(), g, gr(grads, *v));
                    }
                }
            }
            Op::AddBias(a, b) => {
                if req(a) {
                    axpy(T::one(), g, gr(grads, *a));
                }
                if req(b) {
                    let cols = values[b.0].len();
                    let gb = gr(grads, *b);
                    for row in g.chunks(cols) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if req(a) {
                    for ((ga, &gi), &bi) in gr(grads, *a).iter_mut().zip(g).zip(values[b.0].data()) {
                        *ga += gi * bi;
                    }
                }
                if req(b) {
                    for ((gb, &gi), &ai) in gr(grads, *b).iter_mut().zip(g).zip(values[a.0].data()) {
                        *gb += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => axpy(*s, g, gr(grads, *a)),
            Op::Gelu(a) => {
                for ((ga, &gi), &x) in gr(grads, *a).iter_mut().zip(g).zip(values[a.0].data()) {
                    *ga += gi * gelu_grad(x);
                }
            }
            Op::Tanh(a) => {
                for ((ga, &gi), &y) in gr(grads, *a).iter_mut().zip(g).zip(values[i].data()) {
                    *ga += gi * (T::one() - y * y);
                }
            }
            Op::Map(a, df) => {
                for ((ga, &gi), &x) in gr(grads, *a).iter_mut().zip(g).zip(values[a.0].data()) {
                    *ga += gi * df(x);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = values[gamma.0].len();
                let n = rstd.len();
                if req(gamma) {
                    let gg = gr(grads, *gamma);
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if req(beta) {
                    let gb = gr(grads, *beta);
                    for row in g.chunks(d) {
                        axpy(T::one(), row, gb);
                    }
                }
                if req(x) {
                    let gam = values[gamma.0].data();
                    let dn = T::cst(d as f64);
                    let gx = gr(grads, *x);
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dy = g[r * d + j] * gam[j];
                            m1 += dy;
                            m2 += dy * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dy = g[r * d + j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dy - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let out = &values[i];
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let gx = gr(grads, *x);
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * len * inner + c;
                        let mut s = T::zero();
                        for k in 0..len {
                            s += y[base + k * inner] * g[base + k * inner];
                        }
                        for k in 0..len {
                            let idx = base + k * inner;
                            gx[idx] += y[idx] * (g[idx] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = values[table.0].cols();
                let gt = gr(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = values[p.0].len();
                    if req(p) {
                        axpy(T::one(), &g[off..off + n], gr(grads, *p));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = values[i].cols();
                let rows = values[i].rows();
                let mut off = 0;
                for p in parts {
                    let c = values[p.0].cols();
                    if req(p) {
                        let gp = gr(grads, *p);
                        for r in 0..rows {
                            axpy(T::one(), &g[r * total + off..r * total + off + c], &mut gp[r * c..(r + 1) * c]);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let d = values[x.0].cols();
                let gx = gr(grads, *x);
                axpy(T::one(), g, &mut gx[start * d..start * d + g.len()]);
            }
            Op::SliceCols { x, start } => {
                let d = values[x.0].cols();
                let len = values[i].cols();
                let gx = gr(grads, *x);
                for (r, row) in g.chunks(len).enumerate() {
                    axpy(T::one(), row, &mut gx[r * d + start..r * d + start + len]);
                }
            }
            Op::Reshape(x) => axpy(T::one(), g, gr(grads, *x)),
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = values[logits.0].cols();
                let scale = g[0] / T::cst(*count as f64);
                let gl = gr(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let row = &mut gl[r * v..(r + 1) * v];
                    axpy(scale, &probs[r * v..(r + 1) * v], row);
                    row[t] -= scale;
                }
            }
            Op::Attention { q, k, v, shape, mask, probs } => {
                let fresh = |x: &Var| req(x).then(|| vec![T::zero(); values[x.0].len()]);
                let (mut gq, mut gk, mut gv) = (fresh(q), fresh(k), fresh(v));
                attend_backward(
                    values[q.0].data(),
                    values[k.0].data(),
                    values[v.0].data(),
                    probs,
                    *shape,
                    *mask,
                    g,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                    if let Some(buf) = buf {
                        axpy(T::one(), &buf, gr(grads, *var));
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                for gx in gr(grads, *x).iter_mut() {
                    *gx += s;
                }
            }
        }
    }
}

fn ensure<'a, T: Float>(grads: &'a mut [Option<Vec<T>>], values: &[Tensor<T>], v: Var) -> &'a mut Vec<T> {
    let n = values[v.0].len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
fn gr<T>(grads: &mut [Option<Vec<T>>], v: Var) -> &mut Vec<T> {
    grads[v.0].as_mut().expect("gradient buffer allocated before backward rule")
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Gelu(a) | Op::Tanh(a) | Op::Map(a, _) | Op::Reshape(a) | Op::Sum(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Softmax { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Gelu(..) => "gelu",
        Op::Tanh(..) => "tanh",
        Op::Map(..) => "map",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Embedding { .. } => "embedding",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape(..) => "reshape",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::Attention { .. } => "attention",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4.]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::<f32>::zeros(&[4, 5])).unwrap();
        match g.matmul(a, b) {
            Err(NumericsError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 5]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0., 0., 0.])).unwrap();
        let s = g.softmax(a, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let b = g.constant(t(&[2], &[1000., 0.])).unwrap();
        let s = g.softmax(b, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-7 && v[1] >= 0.0 && v[1] < 1e-30);
    }

    #[test]
    fn softmax_bad_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.softmax(a, 2), Err(NumericsError::Axis { .. })));
    }

    #[test]
    fn softmax_over_leading_axis_sums_to_one() {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::randn(&[4, 3], 5.0, &mut rng)).unwrap();
        let s = g.softmax(a, 0).unwrap();
        let v = g.value(s).data();
        for c in 0..3 {
            let sum: f32 = (0..4).map(|r| v[r * 3 + c]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f32>::zeros(&[3, 4])).unwrap();
        let l = g.cross_entropy(z, &[1, 2, 3], 0).unwrap();
        assert!((g.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);

        let mut confident = vec![-1e4f32; 8];
        confident[1] = 0.0;
        confident[4 + 3] = 0.0;
        let z = g.constant(t(&[2, 4], &confident)).unwrap();
        let l = g.cross_entropy(z, &[1, 3], 0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let z = g.constant(Tensor::<f32>::zeros(&[2, 4])).unwrap();
        assert!(g.cross_entropy(z, &[1, 4], 0).is_err());
        assert!(g.cross_entropy(z, &[1], 0).is_err());
    }

    #[test]
    fn cross_entropy_ignores_pad_positions() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::<f32>::zeros(&[2, 4]), true).unwrap();
        let l = g.cross_entropy(z, &[0, 2], 0).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        assert!(grad[..4].iter().all(|&v| v == 0.0));
        assert!((grad[6] + 0.75).abs() < 1e-7);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e30])).unwrap();
        let b = g.mul(a, a);
        assert!(matches!(b, Err(NumericsError::NonFinite { op: "mul" })));
        assert!(g.leaf(t(&[1], &[f32::NAN]), true).is_err());
    }

    #[test]
    fn gradients_do_not_flow_into_constants() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let x = g.leaf(t(&[1, 2], &[1., 1.]), true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3., 7.]);
    }
}
