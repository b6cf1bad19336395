//! Reverse-mode tape.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so the node index is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::cell::{Ref, RefCell};

use crate::kernels::{self, AttnDims, ConvDims};
use crate::scalar::{gemm, MatRef};
use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Borrowed node value returned by [`Graph::value`].
pub enum ValueRef<'a, T> {
    Node(Ref<'a, Tensor<T>>),
    Param(&'a Tensor<T>),
}

impl<T> std::ops::Deref for ValueRef<'_, T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            ValueRef::Node(r) => r,
            ValueRef::Param(t) => t,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul { a: Var, w: Var },
    BatchMatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims, cols: Vec<T> },
    NchwToNlc { a: Var, channels: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var> },
    AttnWeights { q: Var, k: Var, dims: AttnDims, scale: T },
    AttnApply { a: Var, v: Var, dims: AttnDims },
    HeadMean { a: Var, heads: usize },
    SumAll { a: Var },
    WeightedSum { terms: Vec<(Var, T)> },
    Custom { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

struct Node<T> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: RefCell::new(Vec::new()) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn val<'a>(&'a self, nodes: &'a [Node<T>], v: Var) -> &'a Tensor<T> {
        let node = &nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn value(&self, v: Var) -> ValueRef<'_, T> {
        let nodes = self.nodes.borrow();
        if let (None, Op::Param(id)) = (&nodes[v.0].value, &nodes[v.0].op) {
            return ValueRef::Param(self.params.get(*id));
        }
        ValueRef::Node(Ref::map(nodes, |n| n[v.0].value.as_ref().unwrap()))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&self, value: Option<Tensor<T>>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => inputs.iter().any(|v| nodes[v.0].requires_grad),
        };
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Input data that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Constant, &[])
    }

    /// Free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Leaf, &[])
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), &[])
    }

    /// `a [.., K] @ w [K, N] -> [.., N]`.
    pub fn matmul(&self, a: Var, w: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, wv) = (self.val(&nodes, a), self.val(&nodes, w));
            assert_eq!(wv.shape().len(), 2, "matmul rhs must be 2-d");
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            assert_eq!(av.last_dim(), k, "matmul shapes {:?} x {:?}", av.shape(), wv.shape());
            let m = av.numel() / k;
            let mut out = vec![T::zero(); m * n];
            gemm(T::one(), MatRef::dense(av.data(), 0, m, k), MatRef::dense(wv.data(), 0, k, n), T::zero(), &mut out, 0, n, 1);
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(&shape, out)
        };
        self.push(Some(out), Op::MatMul { a, w }, &[a, w])
    }

    /// `x @ w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_broadcast(y, b)
    }

    /// Batched `a [B, N, d] @ b[B, M, d]^T -> [B, N, M]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (self.val(&nodes, a), self.val(&nodes, b));
            let (sa, sb) = (av.shape(), bv.shape());
            assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "bmm_nt shapes {sa:?} {sb:?}");
            let (bs, n, m, d) = (sa[0], sa[1], sb[1], sa[2]);
            let mut out = vec![T::zero(); bs * n * m];
            for i in 0..bs {
                gemm(
                    T::one(),
                    MatRef::dense(av.data(), i * n * d, n, d),
                    MatRef::dense(bv.data(), i * m * d, m, d).t(),
                    T::zero(),
                    &mut out,
                    i * n * m,
                    m,
                    1,
                );
            }
            Tensor::new(&[bs, n, m], out)
        };
        self.push(Some(out), Op::BatchMatMulNt { a, b }, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (self.val(&nodes, a), self.val(&nodes, b));
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect())
        };
        self.push(Some(out), Op::Add { a, b }, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional tables).
    pub fn add_broadcast(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (self.val(&nodes, a), self.val(&nodes, b));
            let (sa, sb) = (av.shape(), bv.shape());
            assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb, "cannot broadcast {sb:?} onto {sa:?}");
            let inner = bv.numel();
            let mut data = av.data().to_vec();
            for chunk in data.chunks_exact_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
            Tensor::new(sa, data)
        };
        self.push(Some(out), Op::AddBroadcast { a, b }, &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::from_real(c);
        let out = {
            let nodes = self.nodes.borrow();
            let av = self.val(&nodes, a);
            Tensor::new(av.shape(), av.data().iter().map(|&x| x * c).collect())
        };
        self.push(Some(out), Op::Scale { a, c }, &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = self.val(&nodes, a);
            Tensor::new(av.shape(), av.data().iter().map(|&x| x.max(T::zero())).collect())
        };
        self.push(Some(out), Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = self.val(&nodes, a);
            Tensor::new(av.shape(), av.data().iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect())
        };
        self.push(Some(out), Op::Sigmoid { a }, &[a])
    }

    /// Layer norm over the trailing dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, mean, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (self.val(&nodes, x), self.val(&nodes, gamma), self.val(&nodes, beta));
            let n = xv.last_dim();
            assert!(gv.numel() == n && bv.numel() == n, "layer_norm affine size mismatch");
            let (y, mean, rstd) = kernels::layer_norm_forward(xv.data(), gv.data(), bv.data(), n);
            (Tensor::new(xv.shape(), y), mean, rstd)
        };
        self.push(Some(out), Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta])
    }

    /// 2-d convolution, `x [B, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (out, dims, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (self.val(&nodes, x), self.val(&nodes, w), self.val(&nodes, b));
            let (sx, sw) = (xv.shape(), wv.shape());
            assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d shapes {sx:?} {sw:?}");
            assert_eq!(bv.numel(), sw[0], "conv2d bias size");
            let dims = ConvDims {
                batch: sx[0],
                in_ch: sx[1],
                out_ch: sw[0],
                height: sx[2],
                width: sx[3],
                kernel: sw[2],
                stride,
                pad,
            };
            let (ho, wo) = dims.out_hw();
            let (y, cols) = kernels::conv2d_forward(xv.data(), wv.data(), bv.data(), dims);
            (Tensor::new(&[dims.batch, dims.out_ch, ho, wo], y), dims, cols)
        };
        self.push(Some(out), Op::Conv2d { x, w, b, dims, cols }, &[x, w, b])
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn nchw_to_nlc(&self, a: Var) -> Var {
        let (out, channels) = {
            let nodes = self.nodes.borrow();
            let av = self.val(&nodes, a);
            let s = av.shape();
            assert_eq!(s.len(), 4, "nchw_to_nlc expects 4-d input");
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut data = vec![T::zero(); av.numel()];
            let src = av.data();
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..hw {
                        data[(bi * hw + i) * c + ci] = src[(bi * c + ci) * hw + i];
                    }
                }
            }
            (Tensor::new(&[b, hw, c], data), c)
        };
        self.push(Some(out), Op::NchwToNlc { a, channels }, &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(Some(out), Op::Reshape { a }, &[a])
    }

    /// Concatenate along the trailing dimension.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.val(&nodes, p)).collect();
            let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
            let rows: usize = lead.iter().product();
            for v in &vals {
                assert_eq!(&v.shape()[..v.shape().len() - 1], lead, "concat leading dims differ");
            }
            let total: usize = vals.iter().map(|v| v.last_dim()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    let d = v.last_dim();
                    data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(&shape, data)
        };
        self.push(Some(out), Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Multi-head attention weights, `q [B, Nq, D]`, `k [B, Nk, D]` -> `[B, H, Nq, Nk]`.
    ///
    /// `key_mask` has `B * Nk` entries; `true` removes that key from every query of the item.
    pub fn attn_weights(&self, q: Var, k: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let (out, dims, scale) = {
            let nodes = self.nodes.borrow();
            let (qv, kv) = (self.val(&nodes, q), self.val(&nodes, k));
            let (sq, sk) = (qv.shape(), kv.shape());
            assert!(sq.len() == 3 && sk.len() == 3 && sq[0] == sk[0] && sq[2] == sk[2], "attention shapes {sq:?} {sk:?}");
            assert_eq!(sq[2] % heads, 0, "dimension {} not divisible by {heads} heads", sq[2]);
            let dims = AttnDims { batch: sq[0], nq: sq[1], nk: sk[1], dim: sq[2], heads };
            if let Some(m) = key_mask {
                assert_eq!(m.len(), dims.batch * dims.nk, "key mask size");
            }
            let scale = T::from_real(1.0 / ((sq[2] / heads) as f64).sqrt());
            let a = kernels::attn_weights_forward(qv.data(), kv.data(), dims, scale, key_mask);
            (Tensor::new(&[dims.batch, heads, dims.nq, dims.nk], a), dims, scale)
        };
        self.push(Some(out), Op::AttnWeights { q, k, dims, scale }, &[q, k])
    }

    /// Apply attention weights `[B, H, Nq, Nk]` to values `[B, Nk, D]` -> `[B, Nq, D]`.
    pub fn attn_apply(&self, a: Var, v: Var) -> Var {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let (av, vv) = (self.val(&nodes, a), self.val(&nodes, v));
            let (sa, sv) = (av.shape(), vv.shape());
            assert!(sa.len() == 4 && sv.len() == 3 && sa[0] == sv[0] && sa[3] == sv[1], "attn_apply shapes {sa:?} {sv:?}");
            let dims = AttnDims { batch: sa[0], heads: sa[1], nq: sa[2], nk: sa[3], dim: sv[2] };
            assert_eq!(dims.dim % dims.heads, 0, "value dim not divisible by heads");
            let o = kernels::attn_apply_forward(av.data(), vv.data(), dims);
            (Tensor::new(&[dims.batch, dims.nq, dims.dim], o), dims)
        };
        self.push(Some(out), Op::AttnApply { a, v, dims }, &[a, v])
    }

    /// Average attention weights over heads, `[B, H, Nq, Nk] -> [B, Nq, Nk]`.
    pub fn head_mean(&self, a: Var) -> Var {
        let (out, heads) = {
            let nodes = self.nodes.borrow();
            let av = self.val(&nodes, a);
            let s = av.shape();
            assert_eq!(s.len(), 4, "head_mean expects [B, H, Nq, Nk]");
            let (b, h, per) = (s[0], s[1], s[2] * s[3]);
            let inv = T::from_real(1.0 / h as f64);
            let mut data = vec![T::zero(); b * per];
            for bi in 0..b {
                for hi in 0..h {
                    let src = &av.data()[(bi * h + hi) * per..(bi * h + hi + 1) * per];
                    for (o, &x) in data[bi * per..(bi + 1) * per].iter_mut().zip(src) {
                        *o += x * inv;
                    }
                }
            }
            (Tensor::new(&[b, s[2], s[3]], data), h)
        };
        self.push(Some(out), Op::HeadMean { a, heads }, &[a])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Some(Tensor::scalar(s)), Op::SumAll { a }, &[a])
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::from_real(w))).collect();
        let value = {
            let nodes = self.nodes.borrow();
            terms.iter().map(|&(v, w)| self.val(&nodes, v).item() * w).sum::<T>()
        };
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Some(Tensor::scalar(value)), Op::WeightedSum { terms }, &inputs)
    }

    /// Scalar node computed outside the tape. `grads[i]` is `d value / d inputs[i]`.
    pub fn custom_scalar(&self, inputs: &[Var], value: f64, grads: Vec<Tensor<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len(), "one gradient per input");
        {
            let nodes = self.nodes.borrow();
            for (&v, g) in inputs.iter().zip(&grads) {
                assert_eq!(self.val(&nodes, v).shape(), g.shape(), "custom gradient shape");
            }
        }
        self.push(Some(Tensor::scalar(T::from_real(value))), Op::Custom { inputs: inputs.to_vec(), grads }, inputs)
    }

    /// Gradients of the scalar `loss` with respect to every parameter and leaf.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(self.val(&nodes, loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.val(&nodes, loss).shape(), vec![T::one()]));
        let mut out: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let value = |v: Var| self.val(&nodes, v);
            let mut acc = |v: Var, t: Tensor<T>| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Constant => {}
                Op::Leaf | Op::Param(_) => {
                    out[id] = Some(g);
                }
                Op::MatMul { a, w } => {
                    let (av, wv) = (value(*a), value(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let m = av.numel() / k;
                    if needs(a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm(T::one(), MatRef::dense(g.data(), 0, m, n), MatRef::dense(wv.data(), 0, k, n).t(), T::zero(), &mut da, 0, k, 1);
                        acc(*a, Tensor::new(av.shape(), da));
                    }
                    if needs(w) {
                        let mut dw = vec![T::zero(); k * n];
                        gemm(T::one(), MatRef::dense(av.data(), 0, m, k).t(), MatRef::dense(g.data(), 0, m, n), T::zero(), &mut dw, 0, n, 1);
                        acc(*w, Tensor::new(wv.shape(), dw));
                    }
                }
                Op::BatchMatMulNt { a, b } => {
                    let (av, bv) = (value(*a), value(*b));
                    let (bs, n, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let m = bv.shape()[1];
                    if needs(a) {
                        let mut da = vec![T::zero(); av.numel()];
                        for i in 0..bs {
                            gemm(T::one(), MatRef::dense(g.data(), i * n * m, n, m), MatRef::dense(bv.data(), i * m * d, m, d), T::zero(), &mut da, i * n * d, d, 1);
                        }
                        acc(*a, Tensor::new(av.shape(), da));
                    }
                    if needs(b) {
                        let mut db = vec![T::zero(); bv.numel()];
                        for i in 0..bs {
                            gemm(T::one(), MatRef::dense(g.data(), i * n * m, n, m).t(), MatRef::dense(av.data(), i * n * d, n, d), T::zero(), &mut db, i * m * d, d, 1);
                        }
                        acc(*b, Tensor::new(bv.shape(), db));
                    }
                }
                Op::Add { a, b } => {
                    if needs(b) {
                        acc(*b, g.clone());
                    }
                    if needs(a) {
                        acc(*a, g);
                    }
                }
                Op::AddBroadcast { a, b } => {
                    if needs(b) {
                        let bv = value(*b);
                        let inner = bv.numel();
                        let mut db = vec![T::zero(); inner];
                        for chunk in g.data().chunks_exact(inner) {
                            for (d, &x) in db.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        acc(*b, Tensor::new(bv.shape(), db));
                    }
                    if needs(a) {
                        acc(*a, g);
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    acc(*a, Tensor::new(g.shape(), g.data().iter().map(|&x| x * c).collect()));
                }
                Op::Relu { a } => {
                    let y = node.value.as_ref().unwrap();
                    let d = g.data().iter().zip(y.data()).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
                    acc(*a, Tensor::new(g.shape(), d));
                }
                Op::Sigmoid { a } => {
                    let y = node.value.as_ref().unwrap();
                    let d = g.data().iter().zip(y.data()).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                    acc(*a, Tensor::new(g.shape(), d));
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let (xv, gv) = (value(*x), value(*gamma));
                    let n = xv.last_dim();
                    let (dx, dg, db) = kernels::layer_norm_backward(xv.data(), gv.data(), mean, rstd, g.data(), n);
                    if needs(x) {
                        acc(*x, Tensor::new(xv.shape(), dx));
                    }
                    if needs(gamma) {
                        acc(*gamma, Tensor::new(gv.shape(), dg));
                    }
                    if needs(beta) {
                        acc(*beta, Tensor::new(value(*beta).shape(), db));
                    }
                }
                Op::Conv2d { x, w, b, dims, cols } => {
                    let wv = value(*w);
                    let (dx, dw, db) = kernels::conv2d_backward(wv.data(), cols, g.data(), *dims, needs(x));
                    if let Some(dx) = dx {
                        acc(*x, Tensor::new(value(*x).shape(), dx));
                    }
                    if needs(w) {
                        acc(*w, Tensor::new(wv.shape(), dw));
                    }
                    if needs(b) {
                        acc(*b, Tensor::new(value(*b).shape(), db));
                    }
                }
                Op::NchwToNlc { a, channels } => {
                    let av = value(*a);
                    let s = av.shape();
                    let (bsz, c, hw) = (s[0], *channels, s[2] * s[3]);
                    let mut d = vec![T::zero(); av.numel()];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            for i in 0..hw {
                                d[(bi * c + ci) * hw + i] = g.data()[(bi * hw + i) * c + ci];
                            }
                        }
                    }
                    acc(*a, Tensor::new(s, d));
                }
                Op::Reshape { a } => {
                    let shape = value(*a).shape().to_vec();
                    acc(*a, g.reshaped(&shape));
                }
                Op::Concat { parts } => {
                    let total = g.last_dim();
                    let rows = g.numel() / total;
                    let mut start = 0;
                    for p in parts {
                        let pv = value(*p);
                        let d = pv.last_dim();
                        if needs(p) {
                            let mut dp = Vec::with_capacity(pv.numel());
                            for r in 0..rows {
                                dp.extend_from_slice(&g.data()[r * total + start..r * total + start + d]);
                            }
                            acc(*p, Tensor::new(pv.shape(), dp));
                        }
                        start += d;
                    }
                }
                Op::AttnWeights { q, k, dims, scale } => {
                    let (qv, kv) = (value(*q), value(*k));
                    let attn = node.value.as_ref().unwrap();
                    let (dq, dk) = kernels::attn_weights_backward(qv.data(), kv.data(), attn.data(), g.data(), *dims, *scale, needs(q), needs(k));
                    if let Some(dq) = dq {
                        acc(*q, Tensor::new(qv.shape(), dq));
                    }
                    if let Some(dk) = dk {
                        acc(*k, Tensor::new(kv.shape(), dk));
                    }
                }
                Op::AttnApply { a, v, dims } => {
                    let (av, vv) = (value(*a), value(*v));
                    let (da, dv) = kernels::attn_apply_backward(av.data(), vv.data(), g.data(), *dims, needs(a), needs(v));
                    if let Some(da) = da {
                        acc(*a, Tensor::new(av.shape(), da));
                    }
                    if let Some(dv) = dv {
                        acc(*v, Tensor::new(vv.shape(), dv));
                    }
                }
                Op::HeadMean { a, heads } => {
                    let av = value(*a);
                    let s = av.shape();
                    let per = s[2] * s[3];
                    let inv = T::from_real(1.0 / *heads as f64);
                    let mut d = vec![T::zero(); av.numel()];
                    for bi in 0..s[0] {
                        let src = &g.data()[bi * per..(bi + 1) * per];
                        for hi in 0..*heads {
                            for (o, &x) in d[(bi * heads + hi) * per..(bi * heads + hi + 1) * per].iter_mut().zip(src) {
                                *o = x * inv;
                            }
                        }
                    }
                    acc(*a, Tensor::new(s, d));
                }
                Op::SumAll { a } => {
                    let gs = g.item();
                    acc(*a, Tensor::full(value(*a).shape(), gs));
                }
                Op::WeightedSum { terms } => {
                    let gs = g.item();
                    for &(v, w) in terms {
                        if needs(&v) {
                            acc(v, Tensor::new(value(v).shape(), vec![gs * w]));
                        }
                    }
                }
                Op::Custom { inputs, grads: local } => {
                    let gs = g.item();
                    for (v, lg) in inputs.iter().zip(local) {
                        if needs(v) {
                            acc(*v, Tensor::new(lg.shape(), lg.data().iter().map(|&x| x * gs).collect()));
                        }
                    }
                }
            }
        }

        let param_of: Vec<Option<ParamId>> = nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Gradients { grads: out, param_of, num_params: self.params.len() }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_of: Vec<Option<ParamId>>,
    num_params: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf or parameter node; `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients, summed over every node that read the parameter.
    pub fn into_param_grads(self) -> ParamGrads<T> {
        let mut out: Vec<Option<Tensor<T>>> = (0..self.num_params).map(|_| None).collect();
        for (g, pid) in self.grads.into_iter().zip(self.param_of) {
            if let (Some(g), Some(pid)) = (g, pid) {
                match &mut out[pid.0] {
                    Some(e) => e.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        ParamGrads { grads: out }
    }
}

/// Gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let c = T::from_real(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= c;
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|x| x.is_finite()))
    }
}
