//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in topological order during the forward pass; backward
//! visits them exactly once in reverse, accumulating gradients across
//! fan-out. A tape is single-threaded (one per training thread), but the
//! convolution kernels may fan work out over a fixed deterministic chunking,
//! so results are bitwise identical for any thread count.

use std::cell::RefCell;

use super::{Element, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// [n, c] + [c], broadcast over rows.
    AddBias(usize, usize),
    /// [b, c, d, h, w] + [c], broadcast over batch and spatial dims.
    AddChannelBias(usize, usize),
    Mul(usize, usize),
    /// Multiply by a compile-time constant scalar.
    Scale(usize, f64),
    MatMul(usize, usize),
    /// `a @ b^T` for [m, k] x [n, k] -> [m, n]; the similarity-matrix shape.
    MatMulNT(usize, usize),
    Conv3d {
        input: usize,
        weight: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Exp(usize),
    /// [b, c, d, h, w] -> [b, c], mean over the spatial dims.
    MeanPoolSpatial(usize),
    /// Row lookup: table [v, d], ids [l] -> [l, d].
    Gather {
        table: usize,
        ids: Vec<u32>,
    },
    /// [l, d] -> [1, d].
    MeanAxis0(usize),
    /// Stack rank-2 parts with equal column counts.
    ConcatRows(Vec<usize>),
    L2NormalizeRows(usize),
    /// Multiply every element of x by the single element of s.
    ScaleByScalar {
        x: usize,
        s: usize,
    },
    LogSoftmaxRows(usize),
    /// Pick entries [(row, col)] of a rank-2 tensor -> [k].
    GatherLogProb {
        x: usize,
        pairs: Vec<(u32, u32)>,
    },
    SumAll(usize),
    MeanAll(usize),
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    op: Op,
    /// Whether any leaf under this node requires a gradient.
    requires: bool,
}

pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    threads: usize,
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`. Each chunk is written by exactly one thread and filled in a fixed
/// order, so the result does not depend on the thread count.
fn par_chunks_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    threads: usize,
    data: &mut [T],
    chunk_len: usize,
    f: F,
) {
    if threads <= 1 || data.len() <= chunk_len {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let mut assignments: Vec<Vec<(usize, &mut [T])>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        assignments[i % threads].push((i, c));
    }
    std::thread::scope(|s| {
        for list in assignments {
            let f = &f;
            s.spawn(move || {
                for (i, c) in list {
                    f(i, c);
                }
            });
        }
    });
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self::with_threads(1)
    }

    pub fn with_threads(threads: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            threads: threads.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, op: Op, requires: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
            requires,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    /// Create a leaf node holding `t`.
    pub fn leaf(&self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// The single element of a scalar node.
    pub fn scalar_value(&self, v: Var) -> E {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Gradient accumulated on a node by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // ---- forward ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "add",
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x + y)
                .collect();
            (
                Tensor::new(ta.shape().to_vec(), data),
                nodes[a.0].requires || nodes[b.0].requires,
            )
        };
        Ok(self.push(value, Op::Add(a.0, b.0), req))
    }

    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
                });
            }
            let cols = tx.shape()[1];
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + tb.data()[i % cols])
                .collect();
            (
                Tensor::new(tx.shape().to_vec(), data),
                nodes[x.0].requires || nodes[bias.0].requires,
            )
        };
        Ok(self.push(value, Op::AddBias(x.0, bias.0), req))
    }

    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            if tx.rank() != 5 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_channel_bias",
                    detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
                });
            }
            let spatial: usize = tx.shape()[2..].iter().product();
            let c = tx.shape()[1];
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + tb.data()[(i / spatial) % c])
                .collect();
            (
                Tensor::new(tx.shape().to_vec(), data),
                nodes[x.0].requires || nodes[bias.0].requires,
            )
        };
        Ok(self.push(value, Op::AddChannelBias(x.0, bias.0), req))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "mul",
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x * y)
                .collect();
            (
                Tensor::new(ta.shape().to_vec(), data),
                nodes[a.0].requires || nodes[b.0].requires,
            )
        };
        Ok(self.push(value, Op::Mul(a.0, b.0), req))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let f = E::from_f64(factor);
            (nodes[x.0].value.map(|v| v * f), nodes[x.0].requires)
        };
        self.push(value, Op::Scale(x.0, factor), req)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
                });
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![E::ZERO; m * n];
            matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out),
                nodes[a.0].requires || nodes[b.0].requires,
            )
        };
        Ok(self.push(value, Op::MatMul(a.0, b.0), req))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_nt",
                    detail: format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
                });
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            let mut out = vec![E::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::ZERO;
                    for p in 0..k {
                        acc += ta.data()[i * k + p] * tb.data()[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
            (
                Tensor::new(vec![m, n], out),
                nodes[a.0].requires || nodes[b.0].requires,
            )
        };
        Ok(self.push(value, Op::MatMulNT(a.0, b.0), req))
    }

    pub fn conv3d(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ti, tw) = (&nodes[input.0].value, &nodes[weight.0].value);
            let value = conv3d_forward(ti, tw, stride, pad, self.threads)?;
            (value, nodes[input.0].requires || nodes[weight.0].requires)
        };
        Ok(self.push(
            value,
            Op::Conv3d {
                input: input.0,
                weight: weight.0,
                stride,
                pad,
            },
            req,
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.map(|v| v.maximum(E::ZERO)),
                nodes[x.0].requires,
            )
        };
        self.push(value, Op::Relu(x.0), req)
    }

    pub fn exp(&self, x: Var) -> Var {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v.exp()), nodes[x.0].requires)
        };
        self.push(value, Op::Exp(x.0), req)
    }

    pub fn mean_pool_spatial(&self, x: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 5 {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_pool_spatial",
                    detail: format!("expected rank 5, got {:?}", tx.shape()),
                });
            }
            let (b, c) = (tx.shape()[0], tx.shape()[1]);
            let spatial: usize = tx.shape()[2..].iter().product();
            let inv = E::from_f64(1.0 / spatial as f64);
            let mut out = vec![E::ZERO; b * c];
            for (i, o) in out.iter_mut().enumerate() {
                let base = i * spatial;
                let mut acc = E::ZERO;
                for s in 0..spatial {
                    acc += tx.data()[base + s];
                }
                *o = acc * inv;
            }
            (Tensor::new(vec![b, c], out), nodes[x.0].requires)
        };
        Ok(self.push(value, Op::MeanPoolSpatial(x.0), req))
    }

    pub fn gather(&self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        if ids.is_empty() {
            return Err(TensorError::EmptySequence);
        }
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            if tt.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather",
                    detail: format!("table must be rank 2, got {:?}", tt.shape()),
                });
            }
            let (v, d) = (tt.shape()[0], tt.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let id = id as usize;
                if id >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather",
                        detail: format!("id {id} >= vocab {v}"),
                    });
                }
                out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            (
                Tensor::new(vec![ids.len(), d], out),
                nodes[table.0].requires,
            )
        };
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    pub fn mean_axis0(&self, x: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 || tx.shape()[0] == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_axis0",
                    detail: format!("expected non-empty rank 2, got {:?}", tx.shape()),
                });
            }
            let (l, d) = (tx.shape()[0], tx.shape()[1]);
            let inv = E::from_f64(1.0 / l as f64);
            let mut out = vec![E::ZERO; d];
            for row in 0..l {
                for col in 0..d {
                    out[col] += tx.data()[row * d + col];
                }
            }
            out.iter_mut().for_each(|v| *v *= inv);
            (Tensor::new(vec![1, d], out), nodes[x.0].requires)
        };
        Ok(self.push(value, Op::MeanAxis0(x.0), req))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let d = nodes[parts[0].0].value.shape()[1];
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank() != 2 || t.shape()[1] != d {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        detail: format!("part shape {:?}, expected [_, {d}]", t.shape()),
                    });
                }
                rows += t.shape()[0];
            }
            let mut out = Vec::with_capacity(rows * d);
            for p in parts {
                out.extend_from_slice(nodes[p.0].value.data());
            }
            (
                Tensor::new(vec![rows, d], out),
                parts.iter().any(|p| nodes[p.0].requires),
            )
        };
        Ok(self.push(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            req,
        ))
    }

    /// Normalize each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "l2_normalize_rows",
                    detail: format!("expected rank 2, got {:?}", tx.shape()),
                });
            }
            let (n, d) = (tx.shape()[0], tx.shape()[1]);
            let mut out = vec![E::ZERO; n * d];
            for i in 0..n {
                let row = &tx.data()[i * d..(i + 1) * d];
                let norm = row.iter().fold(E::ZERO, |a, &v| a + v * v).sqrt();
                if norm > E::ZERO {
                    for j in 0..d {
                        out[i * d + j] = row[j] / norm;
                    }
                }
            }
            (Tensor::new(vec![n, d], out), nodes[x.0].requires)
        };
        Ok(self.push(value, Op::L2NormalizeRows(x.0), req))
    }

    pub fn scale_by_scalar(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[s.0].value;
            if ts.numel() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_by_scalar",
                    detail: format!("scale must be scalar, got {:?}", ts.shape()),
                });
            }
            let sv = ts.item();
            (
                nodes[x.0].value.map(|v| v * sv),
                nodes[x.0].requires || nodes[s.0].requires,
            )
        };
        Ok(self.push(value, Op::ScaleByScalar { x: x.0, s: s.0 }, req))
    }

    /// Row-wise log-softmax, stabilized by row-max subtraction.
    pub fn log_softmax_rows(&self, x: Var) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "log_softmax_rows",
                    detail: format!("expected rank 2, got {:?}", tx.shape()),
                });
            }
            let (n, d) = (tx.shape()[0], tx.shape()[1]);
            let mut out = vec![E::ZERO; n * d];
            for i in 0..n {
                let row = &tx.data()[i * d..(i + 1) * d];
                let max = row.iter().fold(row[0], |a, &v| a.maximum(v));
                let mut lse = E::ZERO;
                for &v in row {
                    lse += (v - max).exp();
                }
                let lse = lse.ln() + max;
                for j in 0..d {
                    out[i * d + j] = row[j] - lse;
                }
            }
            (Tensor::new(vec![n, d], out), nodes[x.0].requires)
        };
        Ok(self.push(value, Op::LogSoftmaxRows(x.0), req))
    }

    /// Pick `x[row, col]` for each pair, producing a vector of length `k`.
    pub fn gather_log_prob(&self, x: Var, pairs: &[(u32, u32)]) -> Result<Var, TensorError> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_log_prob",
                    detail: format!("expected rank 2, got {:?}", tx.shape()),
                });
            }
            let (n, d) = (tx.shape()[0], tx.shape()[1]);
            let mut out = Vec::with_capacity(pairs.len());
            for &(r, c) in pairs {
                if r as usize >= n || c as usize >= d {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_log_prob",
                        detail: format!("({r},{c}) outside [{n},{d}]"),
                    });
                }
                out.push(tx.data()[r as usize * d + c as usize]);
            }
            (Tensor::new(vec![pairs.len()], out), nodes[x.0].requires)
        };
        Ok(self.push(
            value,
            Op::GatherLogProb {
                x: x.0,
                pairs: pairs.to_vec(),
            },
            req,
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let acc = nodes[x.0].value.data().iter().fold(E::ZERO, |a, &v| a + v);
            (Tensor::scalar(acc), nodes[x.0].requires)
        };
        self.push(value, Op::SumAll(x.0), req)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let acc = t.data().iter().fold(E::ZERO, |a, &v| a + v);
            (
                Tensor::scalar(acc * E::from_f64(1.0 / t.numel() as f64)),
                nodes[x.0].requires,
            )
        };
        self.push(value, Op::MeanAll(x.0), req)
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss, accumulating gradients on every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let lt = &nodes[loss.0].value;
            if lt.numel() != 1 {
                return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
            }
            if !lt.item().is_finite() {
                return Err(TensorError::NonFiniteValue { op: "loss" });
            }
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        let count = nodes.len();
        let mut grads: Vec<Option<Tensor<E>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::ONE));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires {
                continue;
            }
            // keep leaf gradients queryable after backward
            if matches!(nodes[id].op, Op::Leaf) {
                nodes[id].grad = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads, self.threads);
        }
        Ok(())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a, E: Element>(
    grads: &'a mut [Option<Tensor<E>>],
    id: usize,
    shape: &[usize],
) -> &'a mut [E] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

fn backprop_node<E: Element>(
    nodes: &[Node<E>],
    id: usize,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
    threads: usize,
) {
    let wants = |i: usize| nodes[i].requires;
    match &nodes[id].op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            for &i in [a, b].iter() {
                if wants(i) {
                    let buf = grad_buf(grads, i, nodes[i].value.shape());
                    for (o, &gv) in buf.iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
        }
        Op::AddBias(x, bias) => {
            if wants(*x) {
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (o, &gv) in buf.iter_mut().zip(g.data()) {
                    *o += gv;
                }
            }
            if wants(*bias) {
                let cols = nodes[*bias].value.numel();
                let buf = grad_buf(grads, *bias, nodes[*bias].value.shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    buf[i % cols] += gv;
                }
            }
        }
        Op::AddChannelBias(x, bias) => {
            if wants(*x) {
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (o, &gv) in buf.iter_mut().zip(g.data()) {
                    *o += gv;
                }
            }
            if wants(*bias) {
                let c = nodes[*bias].value.numel();
                let spatial: usize = nodes[*x].value.shape()[2..].iter().product();
                let buf = grad_buf(grads, *bias, nodes[*bias].value.shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    buf[(i / spatial) % c] += gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bd = nodes[*b].value.data();
                let buf = grad_buf(grads, *a, nodes[*a].value.shape());
                for i in 0..buf.len() {
                    buf[i] += g.data()[i] * bd[i];
                }
            }
            if wants(*b) {
                let ad = nodes[*a].value.data();
                let buf = grad_buf(grads, *b, nodes[*b].value.shape());
                for i in 0..buf.len() {
                    buf[i] += g.data()[i] * ad[i];
                }
            }
        }
        Op::Scale(x, factor) => {
            if wants(*x) {
                let f = E::from_f64(*factor);
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (o, &gv) in buf.iter_mut().zip(g.data()) {
                    *o += gv * f;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if wants(*a) {
                // dA = G @ B^T
                let buf = grad_buf(grads, *a, ta.shape());
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = E::ZERO;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * tb.data()[p * n + j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            }
            if wants(*b) {
                // dB = A^T @ G
                let buf = grad_buf(grads, *b, tb.shape());
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = E::ZERO;
                        for i in 0..m {
                            acc += ta.data()[i * k + p] * g.data()[i * n + j];
                        }
                        buf[p * n + j] += acc;
                    }
                }
            }
        }
        Op::MatMulNT(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if wants(*a) {
                // dA = G @ B
                let buf = grad_buf(grads, *a, ta.shape());
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = E::ZERO;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * tb.data()[j * k + p];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            }
            if wants(*b) {
                // dB = G^T @ A
                let buf = grad_buf(grads, *b, tb.shape());
                for j in 0..n {
                    for p in 0..k {
                        let mut acc = E::ZERO;
                        for i in 0..m {
                            acc += g.data()[i * n + j] * ta.data()[i * k + p];
                        }
                        buf[j * k + p] += acc;
                    }
                }
            }
        }
        Op::Conv3d {
            input,
            weight,
            stride,
            pad,
        } => {
            let (din, dwt) = conv3d_backward(
                &nodes[*input].value,
                &nodes[*weight].value,
                g,
                *stride,
                *pad,
                wants(*input),
                wants(*weight),
                threads,
            );
            if let Some(din) = din {
                let buf = grad_buf(grads, *input, nodes[*input].value.shape());
                for (o, v) in buf.iter_mut().zip(din) {
                    *o += v;
                }
            }
            if let Some(dwt) = dwt {
                let buf = grad_buf(grads, *weight, nodes[*weight].value.shape());
                for (o, v) in buf.iter_mut().zip(dwt) {
                    *o += v;
                }
            }
        }
        Op::Relu(x) => {
            if wants(*x) {
                let xv = nodes[*x].value.data();
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for i in 0..buf.len() {
                    if xv[i] > E::ZERO {
                        buf[i] += g.data()[i];
                    }
                }
            }
        }
        Op::Exp(x) => {
            if wants(*x) {
                let out = nodes[id].value.data();
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for i in 0..buf.len() {
                    buf[i] += g.data()[i] * out[i];
                }
            }
        }
        Op::MeanPoolSpatial(x) => {
            if wants(*x) {
                let spatial: usize = nodes[*x].value.shape()[2..].iter().product();
                let inv = E::from_f64(1.0 / spatial as f64);
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g.data()[i / spatial] * inv;
                }
            }
        }
        Op::Gather { table, ids } => {
            if wants(*table) {
                let d = nodes[*table].value.shape()[1];
                let buf = grad_buf(grads, *table, nodes[*table].value.shape());
                for (l, &idx) in ids.iter().enumerate() {
                    let dst = idx as usize * d;
                    for j in 0..d {
                        buf[dst + j] += g.data()[l * d + j];
                    }
                }
            }
        }
        Op::MeanAxis0(x) => {
            if wants(*x) {
                let (l, d) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let inv = E::from_f64(1.0 / l as f64);
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for row in 0..l {
                    for col in 0..d {
                        buf[row * d + col] += g.data()[col] * inv;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if wants(p) {
                    let buf = grad_buf(grads, p, nodes[p].value.shape());
                    for i in 0..n {
                        buf[i] += g.data()[offset + i];
                    }
                }
                offset += n;
            }
        }
        Op::L2NormalizeRows(x) => {
            if wants(*x) {
                let tx = &nodes[*x].value;
                let out = nodes[id].value.data();
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let buf = grad_buf(grads, *x, tx.shape());
                for i in 0..n {
                    let row = &tx.data()[i * d..(i + 1) * d];
                    let norm = row.iter().fold(E::ZERO, |a, &v| a + v * v).sqrt();
                    if norm > E::ZERO {
                        let orow = &out[i * d..(i + 1) * d];
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let mut dot = E::ZERO;
                        for j in 0..d {
                            dot += orow[j] * grow[j];
                        }
                        for j in 0..d {
                            buf[i * d + j] += (grow[j] - orow[j] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::ScaleByScalar { x, s } => {
            let sv = nodes[*s].value.item();
            if wants(*x) {
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (o, &gv) in buf.iter_mut().zip(g.data()) {
                    *o += gv * sv;
                }
            }
            if wants(*s) {
                let xv = nodes[*x].value.data();
                let mut acc = E::ZERO;
                for (i, &gv) in g.data().iter().enumerate() {
                    acc += gv * xv[i];
                }
                grad_buf(grads, *s, nodes[*s].value.shape())[0] += acc;
            }
        }
        Op::LogSoftmaxRows(x) => {
            if wants(*x) {
                let out = nodes[id].value.data();
                let (n, d) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for i in 0..n {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let orow = &out[i * d..(i + 1) * d];
                    let gsum = grow.iter().fold(E::ZERO, |a, &v| a + v);
                    for j in 0..d {
                        buf[i * d + j] += grow[j] - orow[j].exp() * gsum;
                    }
                }
            }
        }
        Op::GatherLogProb { x, pairs } => {
            if wants(*x) {
                let d = nodes[*x].value.shape()[1];
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for (k, &(r, c)) in pairs.iter().enumerate() {
                    buf[r as usize * d + c as usize] += g.data()[k];
                }
            }
        }
        Op::SumAll(x) => {
            if wants(*x) {
                let gv = g.item();
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for o in buf.iter_mut() {
                    *o += gv;
                }
            }
        }
        Op::MeanAll(x) => {
            if wants(*x) {
                let gv = g.item() * E::from_f64(1.0 / nodes[*x].value.numel() as f64);
                let buf = grad_buf(grads, *x, nodes[*x].value.shape());
                for o in buf.iter_mut() {
                    *o += gv;
                }
            }
        }
    }
}

fn matmul_into<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

struct ConvDims {
    b: usize,
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims, TensorError> {
    if input.rank() != 5 || weight.rank() != 5 {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("input {:?}, weight {:?}", input.shape(), weight.shape()),
        });
    }
    let (b, ci, d, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
        input.shape()[4],
    );
    let (co, wci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if wci != ci || weight.shape()[3] != k || weight.shape()[4] != k {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("weight {:?} incompatible with input channels {ci}", weight.shape()),
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("stride {stride} unsupported"),
        });
    }
    let out_dim = |n: usize| (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1);
    let (od, oh, ow) = match (out_dim(d), out_dim(h), out_dim(w)) {
        (Some(a), Some(b2), Some(c)) => (a, b2, c),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                detail: format!("kernel {k} larger than padded input"),
            })
        }
    };
    Ok(ConvDims {
        b,
        ci,
        d,
        h,
        w,
        co,
        k,
        od,
        oh,
        ow,
    })
}

fn conv3d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
    threads: usize,
) -> Result<Tensor<E>, TensorError> {
    let dm = conv_dims(input, weight, stride, pad)?;
    let out_spatial = dm.od * dm.oh * dm.ow;
    let mut out = vec![E::ZERO; dm.b * dm.co * out_spatial];
    let inp = input.data();
    let wgt = weight.data();
    // one chunk per (batch, out-channel) pair
    par_chunks_mut(threads, &mut out, out_spatial, |chunk_idx, chunk| {
        let b = chunk_idx / dm.co;
        let co = chunk_idx % dm.co;
        let mut o = 0;
        for od in 0..dm.od {
            for oh in 0..dm.oh {
                for ow in 0..dm.ow {
                    let mut acc = E::ZERO;
                    for ci in 0..dm.ci {
                        let in_base = (b * dm.ci + ci) * dm.d;
                        let w_base = ((co * dm.ci + ci) * dm.k) * dm.k * dm.k;
                        for kd in 0..dm.k {
                            let id = (od * stride + kd) as isize - pad as isize;
                            if id < 0 || id as usize >= dm.d {
                                continue;
                            }
                            for kh in 0..dm.k {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih as usize >= dm.h {
                                    continue;
                                }
                                let row =
                                    ((in_base + id as usize) * dm.h + ih as usize) * dm.w;
                                let wrow = w_base + (kd * dm.k + kh) * dm.k;
                                for kw in 0..dm.k {
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw as usize >= dm.w {
                                        continue;
                                    }
                                    acc += inp[row + iw as usize] * wgt[wrow + kw];
                                }
                            }
                        }
                    }
                    chunk[o] = acc;
                    o += 1;
                }
            }
        }
    });
    Ok(Tensor::new(vec![dm.b, dm.co, dm.od, dm.oh, dm.ow], out))
}

/// Gradient of conv3d. Input gradient parallelizes over batch entries and
/// weight gradient over output channels, so each output cell has a single
/// deterministic writer.
#[allow(clippy::too_many_arguments)]
fn conv3d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
    threads: usize,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let dm = conv_dims(input, weight, stride, pad).expect("shapes validated in forward");
    let inp = input.data();
    let wgt = weight.data();
    let gd = g.data();
    let in_spatial = dm.ci * dm.d * dm.h * dm.w;
    let w_per_co = dm.ci * dm.k * dm.k * dm.k;

    let mut d_input_out = None;
    if want_input {
        let mut d_input = vec![E::ZERO; input.numel()];
        par_chunks_mut(threads, &mut d_input, in_spatial, |b, din| {
            for co in 0..dm.co {
                let g_base = (b * dm.co + co) * dm.od;
                for od in 0..dm.od {
                    for oh in 0..dm.oh {
                        for ow in 0..dm.ow {
                            let gval = gd[((g_base + od) * dm.oh + oh) * dm.ow + ow];
                            for ci in 0..dm.ci {
                                let w_base = (co * dm.ci + ci) * dm.k * dm.k * dm.k;
                                for kd in 0..dm.k {
                                    let id = (od * stride + kd) as isize - pad as isize;
                                    if id < 0 || id as usize >= dm.d {
                                        continue;
                                    }
                                    for kh in 0..dm.k {
                                        let ih = (oh * stride + kh) as isize - pad as isize;
                                        if ih < 0 || ih as usize >= dm.h {
                                            continue;
                                        }
                                        let drow = ((ci * dm.d + id as usize) * dm.h
                                            + ih as usize)
                                            * dm.w;
                                        let wrow = w_base + (kd * dm.k + kh) * dm.k;
                                        for kw in 0..dm.k {
                                            let iw =
                                                (ow * stride + kw) as isize - pad as isize;
                                            if iw < 0 || iw as usize >= dm.w {
                                                continue;
                                            }
                                            din[drow + iw as usize] += gval * wgt[wrow + kw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        d_input_out = Some(d_input);
    }

    let mut d_weight_out = None;
    if want_weight {
        let mut d_weight = vec![E::ZERO; weight.numel()];
        par_chunks_mut(threads, &mut d_weight, w_per_co, |co, dw| {
            for b in 0..dm.b {
                let g_base = (b * dm.co + co) * dm.od;
                for od in 0..dm.od {
                    for oh in 0..dm.oh {
                        for ow in 0..dm.ow {
                            let gval = gd[((g_base + od) * dm.oh + oh) * dm.ow + ow];
                            for ci in 0..dm.ci {
                                let in_base = (b * dm.ci + ci) * dm.d;
                                for kd in 0..dm.k {
                                    let id = (od * stride + kd) as isize - pad as isize;
                                    if id < 0 || id as usize >= dm.d {
                                        continue;
                                    }
                                    for kh in 0..dm.k {
                                        let ih = (oh * stride + kh) as isize - pad as isize;
                                        if ih < 0 || ih as usize >= dm.h {
                                            continue;
                                        }
                                        let irow = ((in_base + id as usize) * dm.h
                                            + ih as usize)
                                            * dm.w;
                                        let wrow =
                                            (ci * dm.k * dm.k + kd * dm.k + kh) * dm.k;
                                        for kw in 0..dm.k {
                                            let iw =
                                                (ow * stride + kw) as isize - pad as isize;
                                            if iw < 0 || iw as usize >= dm.w {
                                                continue;
                                            }
                                            dw[wrow + kw] += gval * inp[irow + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        d_weight_out = Some(d_weight);
    }
    (d_input_out, d_weight_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        // loss = sum(x * x), grad = 2x
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.scalar_value(loss), 14.0);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x + x) -> grad 2
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![5.0, -1.0]), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn constants_get_no_grad() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn l2_normalize_unit_rows_and_zero_row() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]),
            true,
        );
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        let n0: f64 = v.row(0).iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n0 - 1.0).abs() < 1e-12);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
        // zero rows contribute zero gradient
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(&tape.grad(x).unwrap().data()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]), true);
        let y = tape.log_softmax_rows(x).unwrap();
        let v = tape.value(y);
        for i in 0..2 {
            let total: f64 = v.row(i).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "row {i} sums to {total}");
        }
    }

    /// Independent 7-loop convolution reference.
    #[allow(clippy::too_many_arguments)]
    fn conv3d_reference(
        inp: &[f64],
        wgt: &[f64],
        b: usize,
        ci: usize,
        d: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let odim = (d + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * co * odim * odim * odim];
        for bb in 0..b {
            for oc in 0..co {
                for od in 0..odim {
                    for oh in 0..odim {
                        for ow in 0..odim {
                            let mut acc = 0.0;
                            for ic in 0..ci {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let id = (od * stride + kd) as isize - pad as isize;
                                            let ih = (oh * stride + kh) as isize - pad as isize;
                                            let iw = (ow * stride + kw) as isize - pad as isize;
                                            if id >= 0
                                                && ih >= 0
                                                && iw >= 0
                                                && (id as usize) < d
                                                && (ih as usize) < d
                                                && (iw as usize) < d
                                            {
                                                let ii = (((bb * ci + ic) * d + id as usize) * d
                                                    + ih as usize)
                                                    * d
                                                    + iw as usize;
                                                let wi = ((((oc * ci + ic) * k + kd) * k + kh)
                                                    * k)
                                                    + kw;
                                                acc += inp[ii] * wgt[wi];
                                            }
                                        }
                                    }
                                }
                            }
                            out[(((bb * co + oc) * odim + od) * odim + oh) * odim + ow] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let (b, ci, d, co, k) = (2, 2, 3, 3, 3);
            let pad_ok = d + 2 * pad >= k;
            assert!(pad_ok);
            let inp: Vec<f64> = (0..b * ci * d * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wgt: Vec<f64> = (0..co * ci * k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv3d_reference(&inp, &wgt, b, ci, d, co, k, stride, pad);

            for threads in [1, 3] {
                let tape: Tape<f64> = Tape::with_threads(threads);
                let x = tape.leaf(Tensor::new(vec![b, ci, d, d, d], inp.clone()), false);
                let w = tape.leaf(Tensor::new(vec![co, ci, k, k, k], wgt.clone()), true);
                let y = tape.conv3d(x, w, stride, pad).unwrap();
                let got = tape.value(y);
                for (a, e) in got.data().iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn conv3d_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, ci, d, co, k) = (3, 2, 8, 4, 3);
        let inp: Vec<f32> = (0..b * ci * d * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt: Vec<f32> = (0..co * ci * k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |threads: usize| {
            let tape: Tape<f32> = Tape::with_threads(threads);
            let x = tape.leaf(Tensor::new(vec![b, ci, d, d, d], inp.clone()), true);
            let w = tape.leaf(Tensor::new(vec![co, ci, k, k, k], wgt.clone()), true);
            let y = tape.conv3d(x, w, 2, 1).unwrap();
            let loss = tape.mean_all(y);
            tape.backward(loss).unwrap();
            (
                tape.value(y).into_data(),
                tape.grad(x).unwrap().into_data(),
                tape.grad(w).unwrap().into_data(),
            )
        };
        let a = run(1);
        for t in [2, 5] {
            let b2 = run(t);
            assert_eq!(a.0, b2.0, "forward differs at {t} threads");
            assert_eq!(a.1, b2.1, "input grad differs at {t} threads");
            assert_eq!(a.2, b2.2, "weight grad differs at {t} threads");
        }
    }

    #[test]
    fn gather_and_bounds() {
        let tape: Tape<f64> = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![0., 1., 10., 11., 20., 21.]), true);
        let g = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[20., 21., 0., 1., 20., 21.]);
        assert!(tape.gather(table, &[3]).is_err());
        assert!(matches!(tape.gather(table, &[]), Err(TensorError::EmptySequence)));
        // repeated rows accumulate
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn matmul_small_known() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]), false);
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
        let d = tape.matmul_nt(a, b).unwrap();
        // a @ b^T = [[1*5+2*6, 1*7+2*8], [3*5+4*6, 3*7+4*8]]
        assert_eq!(tape.value(d).data(), &[17., 23., 39., 53.]);
    }
}
