//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! inputs are strictly earlier nodes, so the push order is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<S>,
        rstd: Vec<S>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SelectCols {
        x: usize,
        cols: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    Reshape(usize),
}

impl<S> Op<S> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectCols { .. } => "select_cols",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Tape of tensor operations recorded during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tag and input ids of a node, for inspection.
    pub fn node_info(&self, v: Var) -> (&'static str, Vec<usize>) {
        let node = &self.nodes[v.0];
        (node.op.tag(), self.inputs_of(&node.op))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Gradient stored on a leaf by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Records a copy of `t` as a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let needs_grad = value.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned tensor as a leaf without copying.
    pub fn leaf_owned(&mut self, mut t: Tensor<S>) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf_owned(t))
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op.tag()));
        }
        let needs_grad = self
            .inputs_of(&op)
            .iter()
            .any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, data),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<S>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::CausalSoftmax(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectCols { x, .. }
            | Op::Pick { x, .. } => vec![*x],
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMul(a.0, b.0), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a.0), vec![n, m], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a.0, b.0), shape, out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a.0, b.0), shape, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a.0, b.0), shape, out)
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddRow(a.0, bias.0), shape, out)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a.0, c), shape, out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k, half) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
        let out = self
            .data(a)
            .iter()
            .map(|&x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a.0), shape, out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a.0), shape, out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a.0), shape, out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a.0), shape, out)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "causal_softmax")?;
        if r != c {
            return Err(Error::Dimension {
                op: "causal_softmax",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let mut out = self.data(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = S::zero());
        }
        self.push(Op::CausalSoftmax(a.0), vec![r, c], out)
    }

    /// Per-row normalization over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Input("layer_norm eps must be positive".into()));
        }
        let dn = S::from_usize_lossy(d);
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut normalized = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normalized,
                rstd,
            },
            shape,
            out,
        )
    }

    /// `−log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if self.value(logits).rows() != 1 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![n],
            });
        }
        self.cross_entropy_rows(logits, &[target])
    }

    /// Mean over rows of the per-row cross-entropy against `targets`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: n,
            });
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = S::zero();
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let (max, tail) = log_sum_exp_split(row);
            total += (max - row[t]) + tail;
            softmax_in_place(row);
        }
        let loss = total / S::from_usize_lossy(rows);
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
        )
    }

    /// Row lookup `table[ids[i]]`, the differentiable embedding gather.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows needs at least one id".into()));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
        )
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, c2],
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            vec![rows, c],
            out,
        )
    }

    /// Horizontal stacking of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.dims2(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r, 0],
                    rhs: vec![r2, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            vec![r, total],
            out,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Index {
                what: "row slice end",
                index: end,
                bound: r + 1,
            });
        }
        let out = self.data(x)[start * c..end * c].to_vec();
        self.push(Op::SliceRows { x: x.0, start }, vec![end - start, c], out)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Index {
                what: "column slice end",
                index: end,
                bound: c + 1,
            });
        }
        let src = self.data(x);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(Op::SliceCols { x: x.0, start }, vec![r, w], out)
    }

    /// Gathers the listed columns (in order) from every row.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_cols")?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index {
                what: "column",
                index: bad,
                bound: c,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            out.extend(cols.iter().map(|&j| src[i * c + j]));
        }
        self.push(
            Op::SelectCols {
                x: x.0,
                cols: cols.to_vec(),
            },
            vec![r, cols.len()],
            out,
        )
    }

    /// Flat-index gather producing a vector.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "element",
                index: bad,
                bound: n,
            });
        }
        if flat.is_empty() {
            return Err(Error::Input("pick of no elements".into()));
        }
        let src = self.data(x);
        let out = flat.iter().map(|&i| src[i]).collect();
        self.push(
            Op::Pick {
                x: x.0,
                idx: flat.to_vec(),
            },
            vec![flat.len()],
            out,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<S>();
        self.push(Op::Sum(a.0), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, S::one() / S::from_usize_lossy(n))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let out = self.data(a).to_vec();
        self.push(Op::Reshape(a.0), shape, out)
    }

    /// Populates `grad` on every leaf with `requires_grad` with `∂root/∂leaf`.
    ///
    /// Gradients from a previous call are discarded first, so repeated calls
    /// on the same graph are bit-identical.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad {
                    self.nodes[i].value.grad = Some(g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (
                    self.nodes[*a].value.shape()[0],
                    self.nodes[*a].value.shape()[1],
                );
                let n = self.nodes[*b].value.shape()[1];
                if self.wants(*a) {
                    let bd = self.nodes[*b].value.data();
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += g[r * n + j] * bd[t * n + j];
                            }
                            ga[r * k + t] += s;
                        }
                    }
                }
                if self.wants(*b) {
                    let ad = self.nodes[*a].value.data();
                    let gb = acc(grads, *b, k * n);
                    for r in 0..m {
                        for t in 0..k {
                            let av = ad[r * k + t];
                            let row = &g[r * n..(r + 1) * n];
                            for (dst, &gv) in gb[t * n..(t + 1) * n].iter_mut().zip(row) {
                                *dst += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (m, n) = (
                        self.nodes[*a].value.shape()[0],
                        self.nodes[*a].value.shape()[1],
                    );
                    let ga = acc(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    add_into(acc(grads, *b, g.len()), g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.nodes[*b].value.data();
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if self.wants(*b) {
                    let ad = self.nodes[*a].value.data();
                    let gb = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let n = self.nodes[*b].value.numel();
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let (c, k, half) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
                    let three = S::lit(3.0);
                    let xd = self.nodes[*a].value.data();
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        let x = xd[j];
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        ga[j] += g[j] * (half * (S::one() + t) + half * x * dt);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * (S::one() - out[j] * out[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * out[j];
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                if self.wants(*a) {
                    let n = node.value.last_dim();
                    let ga = acc(grads, *a, g.len());
                    for ((y, gy), dst) in out.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: S = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dst[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = node.value.last_dim();
                let dn = S::from_usize_lossy(d);
                if self.wants(*x) {
                    let gd = self.nodes[*gain].value.data();
                    let gx = acc(grads, *x, g.len());
                    for (r, (gy, xh)) in g.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = gy[j] * gd[j];
                            gx[r * d + j] +=
                                rstd[r] * (dxh - sum_dxh / dn - xh[j] * sum_dxh_xh / dn);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gy, xh) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gy in g.chunks(d) {
                        add_into(gb, gy);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = self.nodes[*logits].value.last_dim();
                    let w = g[0] / S::from_usize_lossy(targets.len());
                    let gl = acc(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            gl[r * n + j] += w * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let d = node.value.last_dim();
                    let numel = self.nodes[*table].value.numel();
                    let gt = acc(grads, *table, numel);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if self.wants(p) {
                        add_into(acc(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].value.last_dim();
                    if self.wants(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = node.value.last_dim();
                    let numel = self.nodes[*x].value.numel();
                    let gx = acc(grads, *x, numel);
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let w = node.value.last_dim();
                    let c = self.nodes[*x].value.last_dim();
                    let numel = self.nodes[*x].value.numel();
                    let gx = acc(grads, *x, numel);
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], gr);
                    }
                }
            }
            Op::SelectCols { x, cols } => {
                if self.wants(*x) {
                    let c = self.nodes[*x].value.last_dim();
                    let numel = self.nodes[*x].value.numel();
                    let gx = acc(grads, *x, numel);
                    for (r, gr) in g.chunks(cols.len()).enumerate() {
                        for (&j, &v) in cols.iter().zip(gr) {
                            gx[r * c + j] += v;
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                if self.wants(*x) {
                    let numel = self.nodes[*x].value.numel();
                    let gx = acc(grads, *x, numel);
                    for (&i, &v) in idx.iter().zip(g) {
                        gx[i] += v;
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let numel = self.nodes[*a].value.numel();
                    let ga = acc(grads, *a, numel);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, len: usize) -> &mut Vec<S> {
    grads[i].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `c[i][j] = Σ_t a[i][t]·b[t][j]`, accumulated in ascending `t`.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            for (dst, &bv) in crow.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *dst += av * bv;
            }
        }
    }
    c
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let (max, tail) = log_sum_exp_split(x);
    max + tail
}

/// `log Σ exp(x)` as `(max, ln_1p(Σ_{j≠argmax} exp(x_j − max)))`.
///
/// The arg-max term contributes exactly one, so small tails keep full
/// relative precision when the caller subtracts `max` analytically.
pub(crate) fn log_sum_exp_split<S: Scalar>(x: &[S]) -> (S, S) {
    let (arg, max) =
        x.iter()
            .copied()
            .enumerate()
            .fold((0, S::neg_infinity()), |(ai, am), (i, v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
    let rest: S = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max, rest.ln_1p())
}

/// Max-subtracted softmax of one slice.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
