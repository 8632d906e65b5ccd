//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into the inputs
//! that require gradients. Parameters are borrowed, not copied, so a tape is
//! tied to the lifetime of the model that feeds it.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{NumError, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Additive attention-mask value for a dropped position. Any mask entry at or
/// below this value is treated as "drop"; `exp` of it underflows to exactly 0.
pub const MASK_DROP: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Columns {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape {
        x: Var,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    LnClamped {
        x: Var,
        floor: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when `v` was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over every ReLU input recorded so far, or `None` when
    /// the tape has no ReLU. Central differences are only valid when no
    /// input lies within the step of this kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.nodes[x.0].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Owned constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Owned trainable leaf, handy for gradient checks on perturbed copies.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 || av.cols() != bv.shape()[0] {
            return Err(NumError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// Adds a `[n]` bias to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.len() != xv.cols() {
            return Err(NumError::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        let n = bv.len();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NumError::shape(
                "mean_axis",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push("mean_axis", value, Op::Mean { x, outer, n, inner }, &[x])
    }

    /// Mean of selected rows of `x [r, c]`, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(NumError::contract(
                    "segment_mean",
                    format!("segment {s} is empty"),
                ));
            }
            let dst = &mut out[s * cols..(s + 1) * cols];
            for &r in seg {
                if r >= rows {
                    return Err(NumError::contract(
                        "segment_mean",
                        format!("row {r} out of range {rows}"),
                    ));
                }
                for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new(vec![segments.len(), cols], out)?;
        self.push("segment_mean", value, Op::SegmentMean { x, segments }, &[x])
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(NumError::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut normalized = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normalized[r * c + j] = xh;
                out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// Scaled dot-product attention over `q, k, v: [b, l, d]` with an
    /// additive `mask: [b, l, l]` whose entries are 0 (keep) or at most
    /// [`MASK_DROP`] (drop). With `heads > 1` the last axis is split into
    /// equal contiguous head slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(NumError::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (b, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if mask.shape() != [b, l, l] {
            return Err(NumError::shape(
                "attention",
                format!("mask {:?} for sequence shape {:?}", mask.shape(), qv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumError::shape(
                "attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        for (row_idx, row) in mask.data().chunks(l.max(1)).enumerate() {
            if row.iter().any(|&m| m != 0.0 && m > MASK_DROP) {
                return Err(NumError::contract(
                    "attention",
                    format!("mask row {row_idx} holds a value that is neither 0 nor a drop marker"),
                ));
            }
            if l > 0 && row.iter().all(|&m| m != 0.0) {
                return Err(NumError::contract(
                    "attention",
                    format!("mask row {row_idx} drops every position"),
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        let mut scores = vec![0.0; l];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qi = &qv.data()[(bi * l + i) * d + off..][..dh];
                    for j in 0..l {
                        let kj = &kv.data()[(bi * l + j) * d + off..][..dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores[j] = dot * scale + mask.data()[(bi * l + i) * l + j];
                    }
                    softmax_in_place(&mut scores);
                    let p_row = &mut probs[((bi * heads + h) * l + i) * l..][..l];
                    p_row.copy_from_slice(&scores);
                    let o = &mut out[(bi * l + i) * d + off..][..dh];
                    for j in 0..l {
                        let p = scores[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vv.data()[(bi * l + j) * d + off..][..dh];
                        for (ot, vt) in o.iter_mut().zip(vj) {
                            *ot += p * vt;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, l, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push("attention", value, op, &[q, k, v])
    }

    /// Attention weights `[b, heads, l, l]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { q, heads, probs, .. } => {
                let s = self.value(*q).shape();
                Tensor::new(vec![s[0], *heads, s[1], s[1]], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Row lookup: `table [v, d]`, `ids` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(NumError::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= vocab {
                return Err(NumError::contract(
                    "embedding",
                    format!("id {id} outside table of {vocab} rows"),
                ));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding", value, Op::Embedding { table, ids }, &[table])
    }

    /// Slice `[start, end)` of the last axis.
    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c {
            return Err(NumError::shape(
                "columns",
                format!("[{start}, {end}) of width {c}"),
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        self.push("columns", value, Op::Columns { x, start, end }, &[x])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Picks `x[r, index[r]]` from a `[r, c]` tensor, giving `[r]`.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != index.len() {
            return Err(NumError::shape(
                "pick",
                format!("{} rows, {} indices", xv.rows(), index.len()),
            ));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(index.len());
        for (r, &i) in index.iter().enumerate() {
            if i >= c {
                return Err(NumError::contract("pick", format!("index {i} >= width {c}")));
            }
            out.push(xv.row(r)[i]);
        }
        let value = Tensor::vector(out);
        self.push("pick", value, Op::Pick { x, index }, &[x])
    }

    /// `ln(max(x, floor))`. Returns the node and how many entries hit the floor.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<(Var, usize)> {
        let xv = self.value(x);
        let clamped = xv.data().iter().filter(|&&v| v <= floor).count();
        let value = xv.map(|v| v.max(floor).ln());
        let var = self.push("ln_clamped", value, Op::LnClamped { x, floor }, &[x])?;
        Ok((var, clamped))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without a new node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::contract("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumError::contract(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if !g.is_finite() {
                    return Err(NumError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::vector(db));
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.map(|v| v * factor));
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let gv = g.data()[0];
                    accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
                }
            }
            Op::Mean { x, outer, n, inner } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; outer * n * inner];
                    let inv = 1.0 / *n as f64;
                    for o in 0..*outer {
                        for j in 0..*n {
                            for i in 0..*inner {
                                dx[(o * n + j) * inner + i] = g.data()[o * inner + i] * inv;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::SegmentMean { x, segments } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for &r in seg {
                            for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *d += v * inv;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let rows = g.rows();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dgain[j] += g.data()[r * c + j] * normalized[r * c + j];
                            dbias[j] += g.data()[r * c + j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, Tensor::vector(dgain));
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, Tensor::vector(dbias));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * c];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &normalized[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g.data()[r * c + j] * gv.data()[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = k * (c as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads)?,
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Columns { x, start, end } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        dx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    let dx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                    accumulate(grads, *x, dx);
                }
            }
            Op::Pick { x, index } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &i) in index.iter().enumerate() {
                        dx.row_mut(r)[i] = g.data()[r];
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LnClamped { x, floor } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, xv)| if *xv > *floor { gv / xv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; b * l * d];
        let mut dk = vec![0.0; b * l * d];
        let mut dv = vec![0.0; b * l * d];
        let mut dp = vec![0.0; l];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let p_row = &probs[((bi * heads + h) * l + i) * l..][..l];
                    let go = &g.data()[(bi * l + i) * d + off..][..dh];
                    for j in 0..l {
                        let vj = &vv.data()[(bi * l + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    }
                    let weighted: f64 = p_row.iter().zip(&dp).map(|(p, d)| p * d).sum();
                    let qi = &qv.data()[(bi * l + i) * d + off..][..dh];
                    for j in 0..l {
                        let p = p_row[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - weighted) * scale;
                        let base_j = (bi * l + j) * d + off;
                        let base_i = (bi * l + i) * d + off;
                        for t in 0..dh {
                            dq[base_i + t] += ds * kv.data()[base_j + t];
                            dk[base_j + t] += ds * qi[t];
                            dv[base_j + t] += p * go[t];
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        if self.wants(q) {
            accumulate(grads, q, Tensor::new(shape.clone(), dq)?);
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::new(shape.clone(), dk)?);
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::new(shape, dv)?);
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
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
