//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order; node ids are
//! therefore already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Graphs are built fresh for every step and dropped after the
//! gradients have been accumulated into the owning [`ParamStore`].

use std::collections::VecDeque;

use rand::Rng;

use super::kernels::{self, gelu, gelu_grad, sigmoid, softplus};
use super::params::{ParamId, ParamStore};
use super::rope::rope_rotate_in_place;
use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Gelu,
    Softplus,
    Exp,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Unary(Var, Unary),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        clamped: Vec<bool>,
    },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Rope(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    RowNorm(Var),
    RowDot(Var, Var),
    RowScale(Var, Var),
    PairDist(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    StraightThrough { z: Var },
    Detach,
    ConvTranspose { x: Var, w: Var },
    Film { x: Var, gamma: Var, beta: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// The recorded computation of one forward pass.
///
/// Stop-gradient primitives ([`Graph::detach`] and
/// [`Graph::straight_through`]) log the constants they inject. A graph created
/// with [`Graph::replaying`] substitutes those logged constants instead of
/// recomputing them, which turns the surrogate objective into an ordinary
/// function of the parameters that finite differences can probe.
pub struct Graph {
    nodes: Vec<Node>,
    frozen_log: FrozenLog,
    replay: Option<Replay>,
}

/// Values injected by stop-gradient primitives and discrete choices made
/// during a forward pass, in recording order.
#[derive(Clone, Debug, Default)]
pub struct FrozenLog {
    pub tensors: Vec<Tensor>,
    pub indices: Vec<Vec<usize>>,
}

struct Replay {
    tensors: VecDeque<Tensor>,
    indices: VecDeque<Vec<usize>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen_log: FrozenLog::default(),
            replay: None,
        }
    }

    pub fn replaying(log: FrozenLog) -> Self {
        Graph {
            nodes: Vec::new(),
            frozen_log: FrozenLog::default(),
            replay: Some(Replay {
                tensors: log.tensors.into(),
                indices: log.indices.into(),
            }),
        }
    }

    pub fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    pub fn frozen_log(&self) -> &FrozenLog {
        &self.frozen_log
    }

    pub fn into_frozen_log(self) -> FrozenLog {
        self.frozen_log
    }

    /// Records a discrete choice (nearest code, selected experts). When
    /// replaying, the recorded choice is returned and `compute` is not run.
    pub fn frozen_indices(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match self.replay.as_mut() {
            Some(r) => r.indices.pop_front().expect("replay index log exhausted"),
            None => {
                let v = compute();
                self.frozen_log.indices.push(v.clone());
                v
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: Real) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = store.value(id).clone();
        self.push(v, Op::Param(id), true)
    }

    fn take_frozen(&mut self, computed: Tensor) -> Tensor {
        match self.replay.as_mut() {
            Some(r) => {
                let t = r.tensors.pop_front().expect("replay log exhausted");
                assert_eq!(t.shape(), computed.shape(), "replay log shape mismatch");
                t
            }
            None => {
                self.frozen_log.tensors.push(computed.clone());
                computed
            }
        }
    }

    // ----- elementwise ---------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `x[.., d] + b[d]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let d = self.value(b).len();
        let tx = self.value(x);
        assert_eq!(tx.last_dim(), d, "add_row width mismatch");
        let tb = self.value(b).data().to_vec();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&tb) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    /// `x[.., d] ⊙ s[d]`
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let d = self.value(s).len();
        let tx = self.value(x);
        assert_eq!(tx.last_dim(), d, "mul_row width mismatch");
        let ts = self.value(s).data().to_vec();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, sv) in row.iter_mut().zip(&ts) {
                *o *= sv;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::MulRow(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::AddScalar(x), ng)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(Real) -> Real = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => Real::tanh,
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Exp => Real::exp,
            Unary::Square => |a| a * a,
        };
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    // ----- linear algebra ------------------------------------------------

    /// `x[.., k] · w[k, n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.last_dim(), k, "matmul inner dimension mismatch");
        let m = tx.rows();
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(tx.data(), tw.data(), &mut out, m, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(shape, out), Op::MatMul(x, w), ng)
    }

    /// Batched `a[B, M, K] · b[B, K, N]`, or `a · bᵀ` with `b[B, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 3);
        assert_eq!(tb.shape().len(), 3);
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert_eq!(tb.shape()[0], bs, "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(tb.shape()[2], k);
            tb.shape()[1]
        } else {
            assert_eq!(tb.shape()[1], k);
            tb.shape()[2]
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let aa = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let oo = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_bt_acc(aa, bb, oo, m, k, n);
            } else {
                kernels::matmul_acc(aa, bb, oo, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![bs, m, n], out), Op::Bmm { a, b, trans_b }, ng)
    }

    // ----- normalisation -------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            kernels::softmax_row(row);
        }
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Softmax along the last axis restricted to entries where `mask` is set;
    /// masked-out entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), mask.len());
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.len()];
        for (r, (row, mrow)) in tx.data().chunks(d).zip(mask.chunks(d)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(Real::NEG_INFINITY, Real::max);
            assert!(max.is_finite(), "masked softmax row {r} has no active entry");
            let mut s = 0.0;
            for j in 0..d {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[r * d + j] = e;
                    s += e;
                }
            }
            for j in 0..d {
                out[r * d + j] /= s;
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(tx.shape().to_vec(), out),
            Op::MaskedSoftmax(x),
            ng,
        )
    }

    /// Layer normalisation over the last axis with variance floor `eps`,
    /// followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        assert!(d >= 1);
        assert_eq!(self.value(gain).len(), d);
        assert_eq!(self.value(bias).len(), d);
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut clamped = vec![false; rows];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            clamped[r] = var < eps;
            let is = 1.0 / var.max(eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<Real> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                clamped,
            },
            ng,
        )
    }

    // ----- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty());
        let first = self.value(inputs[0]).shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if i != axis {
                    assert_eq!(a, b, "concat shape mismatch on axis {i}");
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::new(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (outer, full, inner) = axis_split(t.shape(), axis);
        assert!(start + len <= full, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::Slice { x, axis, start }, ng)
    }

    /// Rows `idx` of a `[R, d]` matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(idx.len(), d, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Places row `j` of `x[n, d]` at row `idx[j]` of a zero `[rows, d]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        assert_eq!(t.rows(), idx.len());
        let mut out = vec![0.0; rows * d];
        for (j, &i) in idx.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(t.row(j));
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(rows, d, out),
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `[B, N, h·dh] → [B·h, N, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let t = self.value(x);
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for ni in 0..n {
                for h in 0..heads {
                    let src = (bi * n + ni) * d + h * dh;
                    let dst = ((bi * heads + h) * n + ni) * dh;
                    out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![b * heads, n, dh], out),
            Op::SplitHeads { x, heads },
            ng,
        )
    }

    /// `[B·h, N, dh] → [B, N, h·dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let t = self.value(x);
        let (bh, n, dh) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let d = dh * heads;
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for ni in 0..n {
                for h in 0..heads {
                    let dst = (bi * n + ni) * d + h * dh;
                    let src = ((bi * heads + h) * n + ni) * dh;
                    out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![b, n, d], out),
            Op::MergeHeads { x, heads },
            ng,
        )
    }

    /// Rotary embedding of `[B, N, dh]`, token `n` rotated by position `n`.
    pub fn rope(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let (n, dh) = (v.shape()[1], v.shape()[2]);
        assert!(dh % 2 == 0, "rotary embedding needs an even head width");
        for (r, row) in v.data_mut().chunks_mut(dh).enumerate() {
            rope_rotate_in_place(row, (r % n) as Real, false);
        }
        let ng = self.ng(x);
        self.push(v, Op::Rope(x), ng)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as Real;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let out: Vec<Real> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SumLast(x), ng)
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let out: Vec<Real> = t
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<Real>().sqrt())
            .collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::RowNorm(x), ng)
    }

    /// Inner product over the last axis.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let d = ta.last_dim();
        let out: Vec<Real> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out), Op::RowDot(a, b), ng)
    }

    /// `x[R, d] ⊙ s[R]` broadcast along rows.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let d = tx.last_dim();
        assert_eq!(tx.rows(), ts.len(), "row_scale length mismatch");
        let mut out = tx.clone();
        for (row, &sv) in out.data_mut().chunks_mut(d).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::RowScale(x, s), ng)
    }

    /// Euclidean distances between rows of `z[N, d]` and `c[K, d]`.
    pub fn pair_dist(&mut self, z: Var, c: Var) -> Var {
        let (tz, tc) = (self.value(z), self.value(c));
        let d = tz.last_dim();
        assert_eq!(tc.last_dim(), d);
        let (n, k) = (tz.rows(), tc.rows());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let zi = tz.row(i);
            for j in 0..k {
                let s: Real = zi
                    .iter()
                    .zip(tc.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * k + j] = s.sqrt();
            }
        }
        let ng = self.ng(z) || self.ng(c);
        self.push(Tensor::matrix(n, k, out), Op::PairDist(z, c), ng)
    }

    /// Mean over rows of `logsumexp(logits_i) − logits_i[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        let k = t.last_dim();
        assert_eq!(t.rows(), targets.len());
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(k).zip(targets) {
            total += kernels::logsumexp(row) - row[y];
        }
        let v = total / targets.len() as Real;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    // ----- gradient routing ----------------------------------------------

    /// Forward value of `zq`; the backward pass hands the incoming gradient to
    /// `z` unchanged and nothing to `zq`.
    pub fn straight_through(&mut self, z: Var, zq: Var) -> Var {
        assert_eq!(self.shape(z), self.shape(zq), "straight-through shape mismatch");
        let v = if self.replay.is_some() {
            let offset = self.take_frozen(Tensor::zeros(self.shape(z)));
            let mut v = self.value(z).clone();
            v.add_assign(&offset);
            v
        } else {
            let zq_v = self.value(zq).clone();
            let mut offset = zq_v.clone();
            for (o, a) in offset.data_mut().iter_mut().zip(self.value(z).data()) {
                *o -= a;
            }
            self.frozen_log.tensors.push(offset);
            zq_v
        };
        let ng = self.ng(z);
        self.push(v, Op::StraightThrough { z }, ng)
    }

    /// Stop-gradient: same value, no gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let v = self.take_frozen(v);
        self.push(v, Op::Detach, false)
    }

    /// Inverted dropout with a freshly sampled mask. Identity when `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: Real, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<Real> = (0..n)
            .map(|_| {
                if rng.random::<Real>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask));
        self.mul(x, m)
    }

    // ----- decoder primitives --------------------------------------------

    /// Transposed 1-D convolution with stride 2 and padding 1 on
    /// channels-last input `x[B, L, Cin]` with kernel `w[k, Cin, Cout]`.
    /// Output length is `2(L−1) − 2 + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, l, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (ks, wcin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(cin, wcin, "conv_transpose channel mismatch");
        let lo = conv_t_len(l, ks);
        let mut out = vec![0.0; b * lo * cout];
        for bi in 0..b {
            for li in 0..l {
                let xrow = &tx.data()[(bi * l + li) * cin..(bi * l + li + 1) * cin];
                for kk in 0..ks {
                    let Some(o) = conv_t_target(li, kk, lo) else {
                        continue;
                    };
                    let orow = &mut out[(bi * lo + o) * cout..(bi * lo + o + 1) * cout];
                    let wk = &tw.data()[kk * cin * cout..(kk + 1) * cin * cout];
                    kernels::matmul_acc(xrow, wk, orow, 1, cin, cout);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::new(vec![b, lo, cout], out),
            Op::ConvTranspose { x, w },
            ng,
        )
    }

    /// Residual feature-wise modulation `x ⊙ (1 + γ) + β` of `x[B, L, H]`
    /// with per-sample, per-channel `γ[B, H]`, `β[B, H]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (b, l, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(tg.shape(), &[b, h], "film gamma shape");
        assert_eq!(tb.shape(), &[b, h], "film beta shape");
        let mut out = tx.clone();
        for bi in 0..b {
            let g = &tg.data()[bi * h..(bi + 1) * h];
            let be = &tb.data()[bi * h..(bi + 1) * h];
            for li in 0..l {
                let row = &mut out.data_mut()[(bi * l + li) * h..(bi * l + li + 1) * h];
                for j in 0..h {
                    row[j] = row[j] * (1.0 + g[j]) + be[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::Film { x, gamma, beta }, ng)
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; returns the gradient of every node
    /// that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// [`Graph::backward`] followed by accumulation of every parameter
    /// gradient into `store`. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) {
        let grads = self.backward(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if id.store != store.tag() {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [Real]> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        Some(slot.as_mut().unwrap().data_mut())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(gd).zip(va) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let d = self.value(*b).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in gd.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MulRow(x, s) => {
                let d = self.value(*s).len();
                let vs = self.value(*s).data();
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (grow, orow) in gx.chunks_mut(d).zip(gd.chunks(d)) {
                        for j in 0..d {
                            grow[j] += orow[j] * vs[j];
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (orow, xrow) in gd.chunks(d).zip(vx.chunks(d)) {
                        for j in 0..d {
                            gs[j] += orow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(p, q)| *p += c * q);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(p, q)| *p += q);
                }
            }
            Op::MatMul(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.rows();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::matmul_bt_acc(gd, tw.data(), gx, m, n, k);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::matmul_at_acc(tx.data(), gd, gw, m, k, n);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..bs {
                        let gg = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::matmul_acc(gg, bb, out, m, n, k);
                        } else {
                            kernels::matmul_bt_acc(gg, bb, out, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..bs {
                        let gg = &gd[bi * m * n..(bi + 1) * m * n];
                        let aa = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_at_acc(gg, aa, out, m, n, k);
                        } else {
                            kernels::matmul_at_acc(aa, gg, out, m, k, n);
                        }
                    }
                }
            }
            Op::Unary(x, kind) => {
                let vx = self.value(*x).data();
                let vy = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..gx.len() {
                        let dy = match kind {
                            Unary::Sigmoid => vy[j] * (1.0 - vy[j]),
                            Unary::Tanh => 1.0 - vy[j] * vy[j],
                            Unary::Gelu => gelu_grad(vx[j]),
                            Unary::Softplus => sigmoid(vx[j]),
                            Unary::Exp => vy[j],
                            Unary::Square => 2.0 * vx[j],
                        };
                        gx[j] += gd[j] * dy;
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let vy = node.value.data();
                let d = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((grow, yrow), orow) in gx.chunks_mut(d).zip(vy.chunks(d)).zip(gd.chunks(d)) {
                        let dot: Real = yrow.iter().zip(orow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            grow[j] += yrow[j] * (orow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                clamped,
            } => {
                let d = node.value.last_dim();
                let vg = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (orow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += orow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for orow in gd.chunks(d) {
                        gb.iter_mut().zip(orow).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut gh = vec![0.0; d];
                    for (r, (orow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            gh[j] = orow[j] * vg[j];
                        }
                        let mean_gh = gh.iter().sum::<Real>() / d as Real;
                        let mean_ghh =
                            gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<Real>() / d as Real;
                        let grow = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let corr = if clamped[r] { 0.0 } else { hrow[j] * mean_ghh };
                            grow[j] += inv_std[r] * (gh[j] - mean_gh - corr);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += gd[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full_shape = self.value(*x).shape();
                let (outer, full, inner) = axis_split(full_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gd[src + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, &r) in idx.iter().enumerate() {
                        for c in 0..d {
                            gx[r * d + c] += gd[j * d + c];
                        }
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, &r) in idx.iter().enumerate() {
                        for c in 0..d {
                            gx[j * d + c] += gd[r * d + c];
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.value(*x).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ni in 0..n {
                            for h in 0..*heads {
                                let dst = (bi * n + ni) * d + h * dh;
                                let src = ((bi * heads + h) * n + ni) * dh;
                                for e in 0..dh {
                                    gx[dst + e] += gd[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.value(*x).shape();
                let (bh, n, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = dh * heads;
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ni in 0..n {
                            for h in 0..*heads {
                                let src = (bi * n + ni) * d + h * dh;
                                let dst = ((bi * heads + h) * n + ni) * dh;
                                for e in 0..dh {
                                    gx[dst + e] += gd[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Rope(x) => {
                let s = node.value.shape();
                let (n, dh) = (s[1], s[2]);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut buf = vec![0.0; dh];
                    for (r, (grow, orow)) in gx.chunks_mut(dh).zip(gd.chunks(dh)).enumerate() {
                        buf.copy_from_slice(orow);
                        rope_rotate_in_place(&mut buf, (r % n) as Real, true);
                        grow.iter_mut().zip(&buf).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|p| *p += s);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as Real;
                let s = gd[0] / n;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|p| *p += s);
                }
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, &s) in gx.chunks_mut(d).zip(gd) {
                        row.iter_mut().for_each(|p| *p += s);
                    }
                }
            }
            Op::RowNorm(x) => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let norms = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (row, xrow)) in gx.chunks_mut(d).zip(vx.data().chunks(d)).enumerate() {
                        if norms[r] > 0.0 {
                            let f = gd[r] / norms[r];
                            row.iter_mut().zip(xrow).for_each(|(p, q)| *p += f * q);
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (row, brow)) in ga.chunks_mut(d).zip(vb.data().chunks(d)).enumerate() {
                        row.iter_mut().zip(brow).for_each(|(p, q)| *p += gd[r] * q);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, (row, arow)) in gb.chunks_mut(d).zip(va.data().chunks(d)).enumerate() {
                        row.iter_mut().zip(arow).for_each(|(p, q)| *p += gd[r] * q);
                    }
                }
            }
            Op::RowScale(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let d = vx.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (row, orow)) in gx.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        let sv = vs.data()[r];
                        row.iter_mut().zip(orow).for_each(|(p, q)| *p += sv * q);
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (r, (orow, xrow)) in gd.chunks(d).zip(vx.data().chunks(d)).enumerate() {
                        gs[r] += orow.iter().zip(xrow).map(|(p, q)| p * q).sum::<Real>();
                    }
                }
            }
            Op::PairDist(z, c) => {
                let (vz, vc) = (self.value(*z), self.value(*c));
                let d = vz.last_dim();
                let (n, k) = (vz.rows(), vc.rows());
                let dist = node.value.data();
                // coefficient g/D for every pair, zero where D = 0
                let coef: Vec<Real> = (0..n * k)
                    .map(|p| if dist[p] > 0.0 { gd[p] / dist[p] } else { 0.0 })
                    .collect();
                if let Some(gz) = self.acc(grads, *z) {
                    for i in 0..n {
                        for j in 0..k {
                            let cf = coef[i * k + j];
                            if cf == 0.0 {
                                continue;
                            }
                            for e in 0..d {
                                gz[i * d + e] += cf * (vz.data()[i * d + e] - vc.data()[j * d + e]);
                            }
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, *c) {
                    for i in 0..n {
                        for j in 0..k {
                            let cf = coef[i * k + j];
                            if cf == 0.0 {
                                continue;
                            }
                            for e in 0..d {
                                gc[j * d + e] -= cf * (vz.data()[i * d + e] - vc.data()[j * d + e]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = self.value(*logits);
                let k = vl.last_dim();
                let scale = gd[0] / targets.len() as Real;
                if let Some(gl) = self.acc(grads, *logits) {
                    let mut p = vec![0.0; k];
                    for (r, (row, &y)) in vl.data().chunks(k).zip(targets).enumerate() {
                        p.copy_from_slice(row);
                        kernels::softmax_row(&mut p);
                        p[y] -= 1.0;
                        for j in 0..k {
                            gl[r * k + j] += scale * p[j];
                        }
                    }
                }
            }
            Op::StraightThrough { z } => {
                if let Some(gz) = self.acc(grads, *z) {
                    gz.iter_mut().zip(gd).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConvTranspose { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (b, l, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (ks, cout) = (tw.shape()[0], tw.shape()[2]);
                let lo = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for li in 0..l {
                            for kk in 0..ks {
                                let Some(o) = conv_t_target(li, kk, lo) else {
                                    continue;
                                };
                                let grow = &gd[(bi * lo + o) * cout..(bi * lo + o + 1) * cout];
                                let wk = &tw.data()[kk * cin * cout..(kk + 1) * cin * cout];
                                let xg = &mut gx[(bi * l + li) * cin..(bi * l + li + 1) * cin];
                                kernels::matmul_bt_acc(grow, wk, xg, 1, cout, cin);
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for bi in 0..b {
                        for li in 0..l {
                            let xrow = &tx.data()[(bi * l + li) * cin..(bi * l + li + 1) * cin];
                            for kk in 0..ks {
                                let Some(o) = conv_t_target(li, kk, lo) else {
                                    continue;
                                };
                                let grow = &gd[(bi * lo + o) * cout..(bi * lo + o + 1) * cout];
                                let wg = &mut gw[kk * cin * cout..(kk + 1) * cin * cout];
                                kernels::matmul_at_acc(xrow, grow, wg, 1, cin, cout);
                            }
                        }
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let s = node.value.shape();
                let (b, l, h) = (s[0], s[1], s[2]);
                let vg = self.value(*gamma).data();
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * h;
                            for j in 0..h {
                                gx[base + j] += gd[base + j] * (1.0 + vg[bi * h + j]);
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * h;
                            for j in 0..h {
                                gg[bi * h + j] += gd[base + j] * vx[base + j];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * h;
                            for j in 0..h {
                                gb[bi * h + j] += gd[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_t_len(l: usize, ks: usize) -> usize {
    (2 * (l - 1) + ks).saturating_sub(2)
}

fn conv_t_target(li: usize, kk: usize, lo: usize) -> Option<usize> {
    let o = (2 * li + kk).checked_sub(1)?;
    (o < lo).then_some(o)
}

/// Per-node gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` does not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
