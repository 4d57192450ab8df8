//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table. A graph is meant to live for exactly one
//! forward/backward pass and is then dropped.

use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    // rhs shape is a suffix of lhs shape and is broadcast over the leading axes
    Binary { kind: BinKind, lhs: Var, rhs: Var },
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool, shared: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt { x: Var, floor: T },
    Square(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    SumAll(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, index: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient table produced by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("rank >= 1");
    (numel(shape) / d, d)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::c(0.5);
    let cdf = half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(half * x * x)).exp() * T::c(0.398_942_280_401_432_7);
    (x * cdf, cdf + x * pdf)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "item() on a non-scalar node of shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, kind: BinKind, lhs: Var, rhs: Var) -> Var {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        assert!(
            ls.len() >= rs.len() && ls[ls.len() - rs.len()..] == *rs,
            "{kind:?}: rhs shape {rs:?} is not a suffix of lhs shape {ls:?}"
        );
        let x = self.value(lhs).data();
        let y = self.value(rhs).data();
        let ny = y.len();
        let out: Vec<T> = x
            .chunks_exact(ny)
            .flat_map(|row| {
                row.iter().zip(y).map(move |(&a, &b)| match kind {
                    BinKind::Add => a + b,
                    BinKind::Sub => a - b,
                    BinKind::Mul => a * b,
                    BinKind::Div => a / b,
                })
            })
            .collect();
        let shape = self.shape(lhs).to_vec();
        let ng = self.ng(lhs) || self.ng(rhs);
        self.push(Tensor::from_vec(&shape, out), Op::Binary { kind, lhs, rhs }, ng)
    }

    /// Element-wise sum; `b` may have the shape of a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// Matrix product over the last two axes.
    ///
    /// When `b` is 2-D it is shared across every leading index of `a`
    /// (a linear layer); otherwise `a` and `b` must agree on all leading axes
    /// and the product is batched.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the last two axes of `b` transposed.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert!(ashape.len() >= 2 || bshape.len() == 2, "matmul: lhs rank too small");
        let k = *ashape.last().unwrap();
        let (bk, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        assert_eq!(k, bk, "matmul: inner dimensions differ ({ashape:?} x {bshape:?}, trans_b={trans_b})");
        let shared = bshape.len() == 2;
        let (batch, m) = if shared {
            (1, numel(&ashape) / k)
        } else {
            assert!(
                ashape.len() == bshape.len() && ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2],
                "matmul: batch axes differ ({ashape:?} x {bshape:?})"
            );
            (numel(&ashape[..ashape.len() - 2]), ashape[ashape.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    k,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                );
            }
        }
        let mut shape = ashape[..ashape.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, trans_b, shared }, ng)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, d) = split_last(self.shape(x));
        assert_eq!(self.shape(gamma), [d], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), [d], "layer_norm: beta shape");
        let eps = T::c(eps);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let inv_d = T::c(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gs[j] + bs[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, d) = split_last(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(x), ng)
    }

    /// Log-softmax over the last axis (max-subtracted).
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, d) = split_last(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::LogSoftmax(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// `sqrt(max(x, floor))`; no gradient flows where `x < floor`.
    pub fn sqrt_clamped(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::c(floor);
        let t = self.value(x).map(|v| v.max(floor).sqrt());
        let ng = self.ng(x);
        self.push(t, Op::Sqrt { x, floor }, ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(t, Op::Square(x), ng)
    }

    /// Sum over one axis, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&new_shape, out), Op::SumAxis { x, outer, len, inner }, ng)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let len = self.shape(x)[axis];
        let s = self.sum_axis(x, axis);
        self.scale(s, T::c(1.0 / len as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::c(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape: element count must match");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute: rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "permute: {perm:?} is not a permutation");
            seen[p] = true;
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&out_shape, data), Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat: shapes {s:?} and {first:?} differ off axis {axis}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis);
        assert!(len >= 1 && start + len <= full, "narrow: [{start}, {}) out of range {full}", start + len);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&new_shape, out), Op::Narrow { x, axis, start }, ng)
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(!index.is_empty(), "index_select: empty index");
        let rows = shape[0];
        let inner = numel(&shape) / rows;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            assert!(i < rows, "index_select: index {i} out of range {rows}");
            out.extend_from_slice(&xs[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&new_shape, out), Op::IndexSelect { x, index: index.to_vec() }, ng)
    }

    /// Divides each last-axis row by `max(||row||_2, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (_, d) = split_last(self.shape(x));
        let floor = T::c(1e-12);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::L2Normalize { x, norms }, ng)
    }

    /// Reverse pass from a scalar node, seeded with 1.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be a scalar");
        self.backward_from(&[(loss, vec![T::one()])])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Vec<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).numel(), "backward: seed length mismatch");
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let x = self.value(*lhs).data();
                let y = self.value(*rhs).data();
                let ny = y.len();
                if self.ng(*lhs) {
                    let buf = acc(grads, *lhs, x.len());
                    for (gb, gr) in buf.chunks_exact_mut(ny).zip(g.chunks_exact(ny)) {
                        match kind {
                            BinKind::Add => gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b),
                            BinKind::Sub => gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b),
                            BinKind::Mul => {
                                for j in 0..ny {
                                    gb[j] += gr[j] * y[j];
                                }
                            }
                            BinKind::Div => {
                                for j in 0..ny {
                                    gb[j] += gr[j] / y[j];
                                }
                            }
                        }
                    }
                }
                if self.ng(*rhs) {
                    let buf = acc(grads, *rhs, ny);
                    for (r, gr) in g.chunks_exact(ny).enumerate() {
                        let xr = &x[r * ny..(r + 1) * ny];
                        for j in 0..ny {
                            buf[j] += match kind {
                                BinKind::Add => gr[j],
                                BinKind::Sub => -gr[j],
                                BinKind::Mul => gr[j] * xr[j],
                                BinKind::Div => -gr[j] * xr[j] / (y[j] * y[j]),
                            };
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let buf = acc(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let buf = acc(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::MatMul { a, b, trans_b, shared } => {
                self.matmul_backward(*a, *b, *trans_b, *shared, g, grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gs = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let buf = acc(grads, *gamma, d);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let buf = acc(grads, *beta, d);
                    for gr in g.chunks_exact(d) {
                        buf.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.ng(*x) {
                    let inv_d = T::c(1.0 / d as f64);
                    let buf = acc(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gs[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let buf = acc(grads, *x, g.len());
                for ((out, gr), yr) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let buf = acc(grads, *x, g.len());
                for ((out, gr), yr) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let buf = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    buf[j] += g[j] * gelu_parts(xs[j]).1;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let buf = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    if xs[j] > T::zero() {
                        buf[j] += g[j];
                    }
                }
            }
            Op::Sqrt { x, floor } => {
                let xs = self.value(*x).data();
                let y = node.value.data();
                let buf = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    if xs[j] >= *floor {
                        buf[j] += g[j] / (T::c(2.0) * y[j]);
                    }
                }
            }
            Op::Square(x) => {
                let xs = self.value(*x).data();
                let buf = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    buf[j] += T::c(2.0) * xs[j] * g[j];
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                let buf = acc(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut buf[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                let buf = acc(grads, *x, n);
                buf.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                let buf = acc(grads, *x, back.len());
                buf.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        let buf = acc(grads, p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut buf[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let buf = acc(grads, *x, outer * full * inner);
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut buf[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
            Op::IndexSelect { x, index } => {
                let n = self.value(*x).numel();
                let inner = n / self.shape(*x)[0];
                let buf = acc(grads, *x, n);
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut buf[i * inner..(i + 1) * inner];
                    dst.iter_mut().zip(&g[r * inner..(r + 1) * inner]).for_each(|(a, &b)| *a += b);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let xs = self.value(*x).data();
                let floor = T::c(1e-12);
                let buf = acc(grads, *x, g.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let out = &mut buf[r * d..(r + 1) * d];
                    let raw = xs[r * d..(r + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw < floor {
                        for j in 0..d {
                            out[j] += gr[j] / nrm;
                        }
                        continue;
                    }
                    let yr = &y[r * d..(r + 1) * d];
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] += (gr[j] - yr[j] * dot) / nrm;
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, shared: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ashape = self.shape(a);
        let bshape = self.shape(b);
        let k = *ashape.last().unwrap();
        let n = if trans_b { bshape[bshape.len() - 2] } else { bshape[bshape.len() - 1] };
        let (batch, m) = if shared {
            (1, numel(ashape) / k)
        } else {
            (numel(&ashape[..ashape.len() - 2]), ashape[ashape.len() - 2])
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if self.ng(a) {
            let buf = acc(grads, a, av.len());
            // dA = dC * op(B)^T
            let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
            for i in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    rs,
                    cs,
                    T::one(),
                    &mut buf[i * m * k..(i + 1) * m * k],
                    k,
                    1,
                );
            }
        }
        if self.ng(b) {
            let buf = acc(grads, b, bv.len());
            // d op(B) = A^T * dC, written transposed when trans_b
            let (rsc, csc) = if trans_b { (1, k) } else { (n, 1) };
            for i in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    1,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                    T::one(),
                    &mut buf[i * k * n..(i + 1) * k * n],
                    rsc,
                    csc,
                );
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2, 3, 4], (0..24).map(f64::from).collect()));
        let p = g.permute(x, &[2, 0, 1]);
        assert_eq!(g.shape(p), [4, 2, 3]);
        assert_eq!(g.value(p).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let q = g.permute(p, &[1, 2, 0]);
        assert_eq!(g.value(q), g.value(x));
    }

    #[test]
    fn matmul_shared_and_batched_agree() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2, 3], (0..12).map(f64::from).collect()));
        let w = g.constant(Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 1., 1.]));
        let shared = g.matmul(a, w);
        assert_eq!(g.value(shared).data(), &[2., 3., 8., 9., 14., 15., 20., 21.]);
        let wt = g.constant(Tensor::from_vec(&[2, 3], vec![1., 0., 1., 0., 1., 1.]));
        let nt = g.matmul_nt(a, wt);
        assert_eq!(g.value(nt).data(), g.value(shared).data());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = g.mul(x, c);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_cuts_the_path() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[1], vec![2.0]));
        let y = g.square(x);
        let d = g.detach(y);
        let z = g.mul(d, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
    }
}
