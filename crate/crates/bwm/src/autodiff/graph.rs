//! Reverse-mode differentiation graph.
//!
//! A [`Graph`] owns a flat list of nodes in creation order, which is also a
//! valid topological order: an operation may only consume nodes that already
//! exist. [`Var`] is a copyable handle into one graph. Gradients are
//! accumulated on `requires_grad` leaves by [`Var::backward`].
//!
//! Broadcasting is deliberately narrow: the right operand of a binary
//! elementwise op may have a shape that is a suffix of the left operand's
//! shape, in which case it is repeated over the leading dimensions. Matrix
//! multiplication batches over leading dimensions of the left operand.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::{Error, Result};

const PAR_MACS: usize = 1 << 17;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst(#[allow(dead_code)] f64),
    Matmul { transpose_b: bool },
    Relu,
    Gelu,
    Sqrt,
    LayerNorm { eps: f64 },
    Softmax { axis: usize },
    SumAll,
    MeanAll,
    SumAxis0,
    L2NormLast,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    Gather { axis: usize, indices: Vec<usize> },
    SwapAxes12,
    StopGrad,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    /// Accumulated gradient, kept for `requires_grad` leaves only.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A reverse-mode differentiation graph confined to one thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Insert a leaf holding `value`. Gradients accumulate on it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(g.clone(), n.value.shape()))
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Var { g: self, id }
    }
}

fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// out[j] += sum over leading blocks of g[block * rn + j]
fn reduce_to_suffix(g: &[f64], rn: usize, out: &mut [f64]) {
    for block in g.chunks_exact(rn) {
        for (o, x) in out.iter_mut().zip(block) {
            *o += x;
        }
    }
}

/// Split a shape at `axis` into (outer, dim, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

// ── dense kernels ────────────────────────────────────────────────────

/// out[m,n] += A·B with optional transposes; A is m×k (or k×m when `ta`),
/// B is k×n (or n×k when `tb`).
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    let work = m * k * n;
    if work >= PAR_MACS && m >= 2 && rayon::current_num_threads() > 1 {
        let chunk = m.div_ceil(rayon::current_num_threads());
        rayon::scope(|s| {
            for (ci, rows) in out.chunks_mut(chunk * n).enumerate() {
                let i0 = ci * chunk;
                s.spawn(move |_| gemm_serial(i0, rows.len() / n, m, k, n, a, ta, b, tb, rows));
            }
        });
    } else {
        gemm_serial(0, m, m, k, n, a, ta, b, tb, out);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_serial(
    i0: usize,
    mrows: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..mrows {
                let arow = &a[(i0 + i) * k..(i0 + i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // B stored n×k; out[i,j] = dot(a_i, b_j)
            for i in 0..mrows {
                let arow = &a[(i0 + i) * k..(i0 + i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    *o += acc;
                }
            }
        }
        (true, false) => {
            // A stored k×m; out[i,j] += A[kk,i]·B[kk,j]
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for i in 0..mrows {
                    let av = arow[i0 + i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => unreachable!("tt gemm is never produced"),
    }
}

/// Batched `gemm`: `batch` independent multiplies; `b_stride == 0` shares B.
#[allow(clippy::too_many_arguments)]
fn gemm_batched(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    b_stride: usize,
    tb: bool,
    out: &mut [f64],
) {
    let a_stride = m * k;
    let o_stride = m * n;
    if batch >= 2 && batch * m * k * n >= PAR_MACS && rayon::current_num_threads() > 1 {
        rayon::scope(|s| {
            for (bi, orow) in out.chunks_mut(o_stride).enumerate() {
                let ab = &a[bi * a_stride..(bi + 1) * a_stride];
                let bb = &b[bi * b_stride..bi * b_stride + if tb { n * k } else { k * n }];
                s.spawn(move |_| gemm_serial(0, m, m, k, n, ab, ta, bb, tb, orow));
            }
        });
    } else {
        for bi in 0..batch {
            let ab = &a[bi * a_stride..(bi + 1) * a_stride];
            let bb = &b[bi * b_stride..bi * b_stride + if tb { n * k } else { k * n }];
            gemm(m, k, n, ab, ta, bb, tb, &mut out[bi * o_stride..(bi + 1) * o_stride]);
        }
    }
}

/// Scalar GELU (tanh approximation), shared with non-graph code.
pub fn gelu_value(x: f64) -> f64 {
    gelu_fwd(x)
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    /// Clone of the node's value.
    pub fn value(&self) -> Tensor {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.g.nodes.borrow()[self.id].value.item()
    }

    /// Read the node's value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    fn unop<F>(self, op: Op, f: F) -> Var<'g>
    where
        F: FnOnce(&Tensor) -> Tensor,
    {
        let (value, rq) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.g.push(op, vec![self.id], value, rq)
    }

    fn binop_broadcast(self, other: Var<'g>, op: Op, name: &'static str) -> Result<Var<'g>> {
        let (value, rq) = {
            let nodes = self.g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if !suffix_broadcastable(a.value.shape(), b.value.shape()) {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            let rn = b.value.numel().max(1);
            let mut out = a.value.data().to_vec();
            let bd = b.value.data();
            match op {
                Op::Add => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += bd[i % rn];
                    }
                }
                Op::Sub => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o -= bd[i % rn];
                    }
                }
                Op::Mul => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o *= bd[i % rn];
                    }
                }
                _ => unreachable!(),
            }
            (
                Tensor::from_vec(out, a.value.shape()),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.g.push(op, vec![self.id, other.id], value, rq))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop_broadcast(other, Op::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop_broadcast(other, Op::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop_broadcast(other, Op::Mul, "mul")
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unop(Op::Scale(c), |t| {
            Tensor::from_vec(t.data().iter().map(|x| c * x).collect(), t.shape())
        })
    }

    pub fn add_const(self, c: f64) -> Var<'g> {
        self.unop(Op::AddConst(c), |t| {
            Tensor::from_vec(t.data().iter().map(|x| c + x).collect(), t.shape())
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unop(Op::Relu, |t| {
            Tensor::from_vec(t.data().iter().map(|x| x.max(0.0)).collect(), t.shape())
        })
    }

    pub fn gelu(self) -> Var<'g> {
        self.unop(Op::Gelu, |t| {
            Tensor::from_vec(t.data().iter().map(|&x| gelu_fwd(x)).collect(), t.shape())
        })
    }

    /// Elementwise square root. The input is expected positive; the
    /// subgradient at zero is taken to be zero.
    pub fn sqrt(self) -> Var<'g> {
        self.unop(Op::Sqrt, |t| {
            Tensor::from_vec(t.data().iter().map(|x| x.sqrt()).collect(), t.shape())
        })
    }

    /// Matrix product over the last two axes, batching over leading axes of
    /// `self`. `other` may be rank 2 (shared across the batch) or carry the
    /// same leading axes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_tb(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g>, transpose_b: bool) -> Result<Var<'g>> {
        let (value, rq) = {
            let nodes = self.g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let ash = a.value.shape();
            let bsh = b.value.shape();
            let mismatch = || Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            };
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(mismatch());
            }
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let (bk, n) = if transpose_b {
                (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
            } else {
                (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
            };
            if bk != k {
                return Err(mismatch());
            }
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let b_stride = if bsh.len() == 2 {
                0
            } else {
                if bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
                    return Err(mismatch());
                }
                k * n
            };
            let mut osh = ash[..ash.len() - 2].to_vec();
            osh.push(m);
            osh.push(n);
            let mut out = vec![0.0; batch * m * n];
            gemm_batched(
                batch,
                m,
                k,
                n,
                a.value.data(),
                false,
                b.value.data(),
                b_stride,
                transpose_b,
                &mut out,
            );
            (
                Tensor::from_vec(out, &osh),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self
            .g
            .push(Op::Matmul { transpose_b }, vec![self.id, other.id], value, rq))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        self.unop(Op::LayerNorm { eps }, |t| {
            let d = *t.shape().last().expect("layer_norm needs rank >= 1");
            let mut out = vec![0.0; t.numel()];
            for (orow, xrow) in out.chunks_mut(d).zip(t.data().chunks(d)) {
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, x) in orow.iter_mut().zip(xrow) {
                    *o = (x - mean) * inv;
                }
            }
            Tensor::from_vec(out, t.shape())
        })
    }

    /// Softmax over the given axis.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        {
            let nodes = self.g.nodes.borrow();
            let sh = nodes[self.id].value.shape();
            if axis >= sh.len() {
                return Err(Error::Invalid(format!(
                    "softmax axis {axis} out of range for shape {sh:?}"
                )));
            }
        }
        Ok(self.unop(Op::Softmax { axis }, |t| {
            let (outer, d, inner) = axis_blocks(t.shape(), axis);
            let x = t.data();
            let mut out = vec![0.0; t.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * d * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..d {
                        mx = mx.max(x[base + j * inner]);
                    }
                    let mut z = 0.0;
                    for j in 0..d {
                        let e = (x[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..d {
                        out[base + j * inner] /= z;
                    }
                }
            }
            Tensor::from_vec(out, t.shape())
        }))
    }

    pub fn sum_all(self) -> Var<'g> {
        self.unop(Op::SumAll, |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean_all(self) -> Var<'g> {
        self.unop(Op::MeanAll, |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        })
    }

    /// Sum over the leading axis: `[d0, rest…] -> [rest…]`.
    pub fn sum_axis0(self) -> Var<'g> {
        self.unop(Op::SumAxis0, |t| {
            let d0 = t.shape()[0];
            let rest: usize = t.shape()[1..].iter().product();
            let mut out = vec![0.0; rest];
            for block in t.data().chunks_exact(rest.max(1)) {
                for (o, x) in out.iter_mut().zip(block) {
                    *o += x;
                }
            }
            let _ = d0;
            Tensor::from_vec(out, &t.shape()[1..])
        })
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sumsq(self) -> Var<'g> {
        self.mul(self).expect("same shape").sum_all()
    }

    /// Euclidean norm over the last axis, with subgradient 0 at the origin.
    pub fn l2_norm_last(self) -> Var<'g> {
        self.unop(Op::L2NormLast, |t| {
            let d = *t.shape().last().expect("l2_norm_last needs rank >= 1");
            let rows = t.numel() / d;
            let mut out = vec![0.0; rows];
            for (o, row) in out.iter_mut().zip(t.data().chunks(d)) {
                *o = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            Tensor::from_vec(out, &t.shape()[..t.shape().len() - 1])
        })
    }

    /// Euclidean norm of the whole tensor, subgradient 0 at the origin.
    pub fn l2_norm_all(self) -> Result<Var<'g>> {
        let n = self.with_value(|t| t.numel());
        Ok(self.reshape(&[1, n])?.l2_norm_last().reshape(&[])?)
    }

    pub fn concat(self, other: Var<'g>, axis: usize) -> Result<Var<'g>> {
        let (value, rq) = {
            let nodes = self.g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let ash = a.value.shape();
            let bsh = b.value.shape();
            let ok = ash.len() == bsh.len()
                && axis < ash.len()
                && ash
                    .iter()
                    .zip(bsh)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: ash.to_vec(),
                    rhs: bsh.to_vec(),
                });
            }
            let (outer, da, inner) = axis_blocks(ash, axis);
            let db = bsh[axis];
            let mut osh = ash.to_vec();
            osh[axis] = da + db;
            let mut out = vec![0.0; outer * (da + db) * inner];
            let (ad, bd) = (a.value.data(), b.value.data());
            for o in 0..outer {
                let dst = &mut out[o * (da + db) * inner..];
                dst[..da * inner].copy_from_slice(&ad[o * da * inner..(o + 1) * da * inner]);
                dst[da * inner..(da + db) * inner]
                    .copy_from_slice(&bd[o * db * inner..(o + 1) * db * inner]);
            }
            (
                Tensor::from_vec(out, &osh),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self
            .g
            .push(Op::Concat { axis }, vec![self.id, other.id], value, rq))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        {
            let nodes = self.g.nodes.borrow();
            let sh = nodes[self.id].value.shape();
            if axis >= sh.len() || start + len > sh[axis] {
                return Err(Error::Invalid(format!(
                    "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {sh:?}"
                )));
            }
        }
        Ok(self.unop(Op::Slice { axis, start, len }, |t| {
            let (outer, d, inner) = axis_blocks(t.shape(), axis);
            let mut osh = t.shape().to_vec();
            osh[axis] = len;
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &t.data()[(o * d + start) * inner..(o * d + start + len) * inner];
                out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
            Tensor::from_vec(out, &osh)
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        {
            let nodes = self.g.nodes.borrow();
            let t = &nodes[self.id].value;
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let shape = shape.to_vec();
        Ok(self.unop(Op::Reshape, move |t| {
            Tensor::from_vec(t.data().to_vec(), &shape)
        }))
    }

    /// Select `indices` along `axis`. Repeated indices tile; the backward
    /// pass scatter-adds.
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        {
            let nodes = self.g.nodes.borrow();
            let sh = nodes[self.id].value.shape();
            if axis >= sh.len() || indices.iter().any(|&i| i >= sh[axis]) {
                return Err(Error::Invalid(format!(
                    "gather indices out of range on axis {axis} for shape {sh:?}"
                )));
            }
        }
        let idx = indices.to_vec();
        Ok(self.unop(
            Op::Gather {
                axis,
                indices: idx.clone(),
            },
            move |t| {
                let (outer, d, inner) = axis_blocks(t.shape(), axis);
                let mut osh = t.shape().to_vec();
                osh[axis] = idx.len();
                let mut out = vec![0.0; outer * idx.len() * inner];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &t.data()[(o * d + i) * inner..(o * d + i + 1) * inner];
                        out[(o * idx.len() + j) * inner..(o * idx.len() + j + 1) * inner]
                            .copy_from_slice(src);
                    }
                }
                Tensor::from_vec(out, &osh)
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(self) -> Result<Var<'g>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::Invalid(format!(
                "transpose2 needs rank 2, got shape {sh:?}"
            )));
        }
        self.reshape(&[1, sh[0], sh[1]])?
            .swap_axes_12()?
            .reshape(&[sh[1], sh[0]])
    }

    /// Swap axes 1 and 2 of a rank ≥ 3 tensor.
    pub fn swap_axes_12(self) -> Result<Var<'g>> {
        {
            let nodes = self.g.nodes.borrow();
            let sh = nodes[self.id].value.shape();
            if sh.len() < 3 {
                return Err(Error::Invalid(format!(
                    "swap_axes_12 needs rank >= 3, got shape {sh:?}"
                )));
            }
        }
        Ok(self.unop(Op::SwapAxes12, |t| {
            Tensor::from_vec(swap12(t), &swapped12_shape(t.shape()))
        }))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward
    /// pass.
    pub fn stop_grad(self) -> Var<'g> {
        let value = self.value();
        self.g.push(Op::StopGrad, vec![self.id], value, false)
    }

    /// Reverse pass from a scalar root. Gradients land on `requires_grad`
    /// leaves and accumulate across repeated calls.
    pub fn backward(self) -> Result<()> {
        let nodes = self.g.nodes.borrow();
        let root = &nodes[self.id];
        if !root.value.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_op(node, &nodes, &g, &mut grads);
        }
        drop(nodes);

        let mut nodes = self.g.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut nodes[id]) else {
                continue;
            };
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn swapped12_shape(sh: &[usize]) -> Vec<usize> {
    let mut o = sh.to_vec();
    o.swap(1, 2);
    o
}

fn swap12(t: &Tensor) -> Vec<f64> {
    let sh = t.shape();
    let (d0, d1, d2) = (sh[0], sh[1], sh[2]);
    let inner: usize = sh[3..].iter().product();
    let x = t.data();
    let mut out = vec![0.0; t.numel()];
    for a in 0..d0 {
        for i in 0..d1 {
            for j in 0..d2 {
                let src = ((a * d1 + i) * d2 + j) * inner;
                let dst = ((a * d2 + j) * d1 + i) * inner;
                out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, numel: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
    f(slot);
}

fn backward_op(node: &Node, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let input = |i: usize| -> &Node { &nodes[node.inputs[i]] };
    match &node.op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add | Op::Sub => {
            let (a, b) = (input(0), input(1));
            let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
            if a.requires_grad {
                accumulate(grads, node.inputs[0], a.value.numel(), |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            if b.requires_grad {
                let rn = b.value.numel().max(1);
                accumulate(grads, node.inputs[1], b.value.numel(), |gb| {
                    let mut tmp = vec![0.0; rn];
                    reduce_to_suffix(g, rn, &mut tmp);
                    for (o, x) in gb.iter_mut().zip(&tmp) {
                        *o += sign * x;
                    }
                });
            }
        }
        Op::Mul => {
            let (a, b) = (input(0), input(1));
            let rn = b.value.numel().max(1);
            if a.requires_grad {
                let bd = b.value.data();
                accumulate(grads, node.inputs[0], a.value.numel(), |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * bd[i % rn];
                    }
                });
            }
            if b.requires_grad {
                let ad = a.value.data();
                accumulate(grads, node.inputs[1], b.value.numel(), |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % rn] += gv * ad[i];
                    }
                });
            }
        }
        Op::Scale(c) => {
            if input(0).requires_grad {
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += c * x;
                    }
                });
            }
        }
        Op::AddConst(_) => {
            if input(0).requires_grad {
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
        }
        Op::Matmul { transpose_b } => {
            let (a, b) = (input(0), input(1));
            let ash = a.value.shape();
            let bsh = b.value.shape();
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let n = if *transpose_b {
                bsh[bsh.len() - 2]
            } else {
                bsh[bsh.len() - 1]
            };
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let b_shared = bsh.len() == 2;
            let b_stride = if b_shared { 0 } else { k * n };
            if a.requires_grad {
                // dA = dC·Bᵀ (nn→nt) or dC·B (nt→nn)
                accumulate(grads, node.inputs[0], a.value.numel(), |ga| {
                    let bd = b.value.data();
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * b_stride..bi * b_stride + k * n];
                        gemm(
                            m,
                            n,
                            k,
                            gc,
                            false,
                            bb,
                            !*transpose_b,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
            }
            if b.requires_grad {
                accumulate(grads, node.inputs[1], b.value.numel(), |gb| {
                    let ad = a.value.data();
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * b_stride..bi * b_stride + k * n];
                        if *transpose_b {
                            // B is n×k; dB = dCᵀ·A (tn)
                            gemm(n, m, k, gc, true, ab, false, dst);
                        } else {
                            // dB = Aᵀ·dC (tn)
                            gemm(k, m, n, ab, true, gc, false, dst);
                        }
                    }
                });
            }
        }
        Op::Relu => {
            if input(0).requires_grad {
                let x = input(0).value.data();
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Gelu => {
            if input(0).requires_grad {
                let x = input(0).value.data();
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
        }
        Op::Sqrt => {
            if input(0).requires_grad {
                let y = node.value.data();
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / y[i];
                        }
                    }
                });
            }
        }
        Op::LayerNorm { eps } => {
            if input(0).requires_grad {
                let x = input(0).value.data();
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for r in 0..g.len() / d {
                        let xr = &x[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / d as f64;
                        let gymean =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dst = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += inv * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                });
            }
        }
        Op::Softmax { axis } => {
            if input(0).requires_grad {
                let y = node.value.data();
                let (outer, d, inner) = axis_blocks(node.value.shape(), *axis);
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * d * inner + i;
                            let mut dot = 0.0;
                            for j in 0..d {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..d {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::SumAll => {
            if input(0).requires_grad {
                let n = input(0).value.numel();
                accumulate(grads, node.inputs[0], n, |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                });
            }
        }
        Op::MeanAll => {
            if input(0).requires_grad {
                let n = input(0).value.numel();
                let c = g[0] / n as f64;
                accumulate(grads, node.inputs[0], n, |ga| {
                    for o in ga.iter_mut() {
                        *o += c;
                    }
                });
            }
        }
        Op::SumAxis0 => {
            if input(0).requires_grad {
                let n = input(0).value.numel();
                let rest = g.len().max(1);
                accumulate(grads, node.inputs[0], n, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i % rest];
                    }
                });
            }
        }
        Op::L2NormLast => {
            if input(0).requires_grad {
                let x = input(0).value.data();
                let y = node.value.data();
                let d = *input(0).value.shape().last().unwrap();
                accumulate(grads, node.inputs[0], x.len(), |ga| {
                    for r in 0..y.len() {
                        if y[r] > 0.0 {
                            let c = g[r] / y[r];
                            for j in 0..d {
                                ga[r * d + j] += c * x[r * d + j];
                            }
                        }
                    }
                });
            }
        }
        Op::Concat { axis } => {
            let (a, b) = (input(0), input(1));
            let (outer, da, inner) = axis_blocks(a.value.shape(), *axis);
            let db = b.value.shape()[*axis];
            if a.requires_grad {
                accumulate(grads, node.inputs[0], a.value.numel(), |ga| {
                    for o in 0..outer {
                        let src = &g[o * (da + db) * inner..o * (da + db) * inner + da * inner];
                        for (dst, x) in ga[o * da * inner..(o + 1) * da * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *dst += x;
                        }
                    }
                });
            }
            if b.requires_grad {
                accumulate(grads, node.inputs[1], b.value.numel(), |gb| {
                    for o in 0..outer {
                        let src = &g[o * (da + db) * inner + da * inner
                            ..(o + 1) * (da + db) * inner];
                        for (dst, x) in gb[o * db * inner..(o + 1) * db * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *dst += x;
                        }
                    }
                });
            }
        }
        Op::Slice { axis, start, len } => {
            if input(0).requires_grad {
                let (outer, d, inner) = axis_blocks(input(0).value.shape(), *axis);
                accumulate(grads, node.inputs[0], input(0).value.numel(), |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * d + start) * inner..(o * d + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d0, x) in dst.iter_mut().zip(src) {
                            *d0 += x;
                        }
                    }
                });
            }
        }
        Op::Reshape => {
            if input(0).requires_grad {
                accumulate(grads, node.inputs[0], g.len(), |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
        }
        Op::Gather { axis, indices } => {
            if input(0).requires_grad {
                let (outer, d, inner) = axis_blocks(input(0).value.shape(), *axis);
                accumulate(grads, node.inputs[0], input(0).value.numel(), |ga| {
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = &g[(o * indices.len() + j) * inner
                                ..(o * indices.len() + j + 1) * inner];
                            let dst = &mut ga[(o * d + i) * inner..(o * d + i + 1) * inner];
                            for (d0, x) in dst.iter_mut().zip(src) {
                                *d0 += x;
                            }
                        }
                    }
                });
            }
        }
        Op::SwapAxes12 => {
            if input(0).requires_grad {
                let gt = Tensor::from_vec(g.to_vec(), node.value.shape());
                let back = swap12(&gt);
                accumulate(grads, node.inputs[0], back.len(), |ga| {
                    for (o, x) in ga.iter_mut().zip(&back) {
                        *o += x;
                    }
                });
            }
        }
    }
}
