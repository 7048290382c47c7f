//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in evaluation order. Each node keeps
//! its forward value, so [`Tape::backward`] is a single reverse sweep that
//! applies each op's adjoint rule. The tape is append-only, which makes the
//! node order a topological order by construction.
//!
//! Broadcasting is explicit: elementwise binary ops require equal shapes, and
//! a `[1, n]` row is expanded with [`OpKind::Broadcast`] or a whole batch with
//! [`OpKind::RepeatRows`].

mod special;
mod tensor;

pub use special::{digamma, lgamma};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Sum of all entries, to a scalar.
    Sum,
    /// Mean of all entries, to a scalar.
    Mean,
    /// `[m, n] -> [m, 1]`
    RowSum,
    /// `[m, n] -> [m, 1]`, stabilized by the row maximum.
    RowLogSumExp,
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Neg,
    Square,
    Lgamma,
    /// `[1, n] -> [rows, n]`
    Broadcast { rows: usize },
    /// `[m, n] -> [m * times, n]`, each row repeated `times` times in place.
    RepeatRows { times: usize },
    /// Column range `start..end` of a matrix.
    Slice { start: usize, end: usize },
    /// Column-wise concatenation of matrices with equal row counts.
    Concat,
    Reshape { shape: Vec<usize> },
    /// `out[:, j] = in[:, perm[j]]`
    PermuteCols { perm: Vec<usize> },
    Scale(f64),
    AddScalar(f64),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::RowLogSumExp => "row_logsumexp",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Neg => "neg",
            OpKind::Square => "square",
            OpKind::Lgamma => "lgamma",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::RepeatRows { .. } => "repeat_rows",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::PermuteCols { .. } => "permute_cols",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Constant,
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Operation recorder. Confined to one thread; build one per batch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`. Every leaf has one (zeros when unreachable); interior
    /// nodes are released during the sweep and return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.with_data(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
        OpKind::Concat => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::shape(
            "record",
            format!("{} takes {arity} inputs, got {}", kind.name(), inputs.len()),
        ));
    }
    let a = inputs[0];
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let b = inputs[1];
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    kind.name(),
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            match kind {
                OpKind::Add => zip_map(a, b, |x, y| x + y),
                OpKind::Sub => zip_map(a, b, |x, y| x - y),
                OpKind::Mul => zip_map(a, b, |x, y| x * y),
                _ => zip_map(a, b, |x, y| x / y),
            }
        }
        OpKind::MatMul => {
            let b = inputs[1];
            let (m, k) = require_matrix("matmul", a)?;
            let (k2, n) = require_matrix("matmul", b)?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
            Tensor::matrix(m, n, c)?
        }
        OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
        OpKind::Mean => {
            if a.numel() == 0 {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        }
        OpKind::RowSum => {
            let (m, _) = require_matrix("row_sum", a)?;
            let data = (0..m).map(|r| a.row_slice(r).iter().sum()).collect();
            Tensor::matrix(m, 1, data)?
        }
        OpKind::RowLogSumExp => {
            let (m, n) = require_matrix("row_logsumexp", a)?;
            if n == 0 {
                return Err(Error::shape("row_logsumexp", "zero columns"));
            }
            let data = (0..m).map(|r| log_sum_exp(a.row_slice(r))).collect();
            Tensor::matrix(m, 1, data)?
        }
        OpKind::Exp => a.map(f64::exp),
        OpKind::Log => a.map(f64::ln),
        OpKind::Tanh => a.map(f64::tanh),
        OpKind::Softplus => a.map(softplus),
        OpKind::Sigmoid => a.map(sigmoid),
        OpKind::Neg => a.map(|x| -x),
        OpKind::Square => a.map(|x| x * x),
        OpKind::Lgamma => a.map(lgamma),
        OpKind::Broadcast { rows } => {
            let (m, n) = require_matrix("broadcast", a)?;
            if m != 1 {
                return Err(Error::shape("broadcast", format!("expected [1, n], got {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(rows * n);
            for _ in 0..*rows {
                data.extend_from_slice(a.data());
            }
            Tensor::matrix(*rows, n, data)?
        }
        OpKind::RepeatRows { times } => {
            let (m, n) = require_matrix("repeat_rows", a)?;
            let mut data = Vec::with_capacity(m * times * n);
            for r in 0..m {
                let row = a.row_slice(r);
                for _ in 0..*times {
                    data.extend_from_slice(row);
                }
            }
            Tensor::matrix(m * times, n, data)?
        }
        OpKind::Slice { start, end } => {
            let (m, n) = require_matrix("slice", a)?;
            if start > end || *end > n {
                return Err(Error::shape("slice", format!("{start}..{end} of {n} columns")));
            }
            let mut data = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                data.extend_from_slice(&a.row_slice(r)[*start..*end]);
            }
            Tensor::matrix(m, end - start, data)?
        }
        OpKind::Concat => {
            let (m, _) = require_matrix("concat", a)?;
            let mut total = 0;
            for t in inputs {
                let (mi, ni) = require_matrix("concat", t)?;
                if mi != m {
                    return Err(Error::shape("concat", format!("row counts {m} vs {mi}")));
                }
                total += ni;
            }
            let mut data = Vec::with_capacity(m * total);
            for r in 0..m {
                for t in inputs {
                    data.extend_from_slice(t.row_slice(r));
                }
            }
            Tensor::matrix(m, total, data)?
        }
        OpKind::Reshape { shape } => a.clone().reshaped(shape.clone())?,
        OpKind::PermuteCols { perm } => {
            let (m, n) = require_matrix("permute_cols", a)?;
            let mut seen = vec![false; n];
            if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute_cols", format!("{perm:?} is not a permutation of {n}")));
            }
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                let row = a.row_slice(r);
                data.extend(perm.iter().map(|&p| row[p]));
            }
            Tensor::matrix(m, n, data)?
        }
        OpKind::Scale(c) => a.map(|x| c * x),
        OpKind::AddScalar(c) => a.map(|x| x + c),
    };
    Ok(out)
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind, parents: Vec<usize>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            parents,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf input".into()));
        }
        Ok(self.push(NodeKind::Leaf, Vec::new(), value, true))
    }

    /// Input that never receives an adjoint (data, noise, masks).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("constant input".into()));
        }
        Ok(self.push(NodeKind::Constant, Vec::new(), value, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Evaluates `kind` on `inputs` and appends the node.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&kind, &values)?;
        if !out.all_finite() {
            return Err(Error::NonFinite(format!("{} (node {})", kind.name(), self.nodes.len())));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(NodeKind::Op(kind), parents, out, needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[a])
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::RowSum, &[a])
    }
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::RowLogSumExp, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Neg, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Square, &[a])
    }
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Lgamma, &[a])
    }
    pub fn broadcast(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.record(OpKind::Broadcast { rows }, &[a])
    }
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 1 {
            return Ok(a);
        }
        self.record(OpKind::RepeatRows { times }, &[a])
    }
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(OpKind::Slice { start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts)
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(OpKind::Reshape { shape }, &[a])
    }
    pub fn permute_cols(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        self.record(OpKind::PermuteCols { perm }, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(OpKind::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(OpKind::AddScalar(c), &[a])
    }

    /// `[rows, n] + [1, n]` bias addition.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let b = if self.value(row).rows() == rows {
            row
        } else {
            self.broadcast(row, rows)?
        };
        self.add(a, b)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(out.value.with_data(vec![1.0]));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op(kind) = &node.kind else {
                continue;
            };
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (slot, &p) in node.parents.iter().enumerate() {
                assert!(p < i, "tape order violated: parent {p} of node {i}");
                if !self.nodes[p].needs_grad {
                    continue;
                }
                let contrib = self.adjoint(kind, node, slot, &g)?;
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contrib.data())
                        .for_each(|(a, c)| *a += c),
                    empty => *empty = Some(contrib),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if matches!(node.kind, NodeKind::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    /// Contribution of `g = d out / d node` to parent number `slot`.
    fn adjoint(&self, kind: &OpKind, node: &Node, slot: usize, g: &Tensor) -> Result<Tensor> {
        let parent = |s: usize| &self.nodes[node.parents[s]].value;
        let x = parent(slot);
        let y = &node.value;
        let t = match kind {
            OpKind::Add => g.clone(),
            OpKind::Sub => {
                if slot == 0 {
                    g.clone()
                } else {
                    g.map(|v| -v)
                }
            }
            OpKind::Mul => zip_map(g, parent(1 - slot), |g, o| g * o),
            OpKind::Div => {
                let b = parent(1);
                if slot == 0 {
                    zip_map(g, b, |g, b| g / b)
                } else {
                    // -g * a / b^2 = -g * y / b
                    let gy = zip_map(g, y, |g, y| g * y);
                    zip_map(&gy, b, |gy, b| -gy / b)
                }
            }
            OpKind::MatMul => {
                let a = parent(0);
                let b = parent(1);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                if slot == 0 {
                    // dA = G B^T
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut out);
                    Tensor::matrix(m, k, out)?
                } else {
                    // dB = A^T G
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut out);
                    Tensor::matrix(k, n, out)?
                }
            }
            OpKind::Sum => Tensor::full(x.shape(), g.item()),
            OpKind::Mean => Tensor::full(x.shape(), g.item() / x.numel() as f64),
            OpKind::RowSum => {
                let n = x.cols();
                let data = (0..x.numel()).map(|i| g.data()[i / n]).collect();
                x.with_data(data)
            }
            OpKind::RowLogSumExp => {
                let n = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| g.data()[i / n] * (v - y.data()[i / n]).exp())
                    .collect();
                x.with_data(data)
            }
            OpKind::Exp => zip_map(g, y, |g, y| g * y),
            OpKind::Log => zip_map(g, x, |g, x| g / x),
            OpKind::Tanh => zip_map(g, y, |g, y| g * (1.0 - y * y)),
            OpKind::Softplus => zip_map(g, x, |g, x| g * sigmoid(x)),
            OpKind::Sigmoid => zip_map(g, y, |g, y| g * y * (1.0 - y)),
            OpKind::Neg => g.map(|v| -v),
            OpKind::Square => zip_map(g, x, |g, x| 2.0 * g * x),
            OpKind::Lgamma => zip_map(g, x, |g, x| g * digamma(x)),
            OpKind::Broadcast { rows } => {
                let n = x.cols();
                let mut data = vec![0.0; n];
                for r in 0..*rows {
                    for (d, v) in data.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                x.with_data(data)
            }
            OpKind::RepeatRows { times } => {
                let (m, n) = (x.rows(), x.cols());
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let dst = &mut data[r * n..(r + 1) * n];
                    for k in 0..*times {
                        for (d, v) in dst.iter_mut().zip(g.row_slice(r * times + k)) {
                            *d += v;
                        }
                    }
                }
                x.with_data(data)
            }
            OpKind::Slice { start, end } => {
                let (m, n) = (x.rows(), x.cols());
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    data[r * n + start..r * n + end].copy_from_slice(g.row_slice(r));
                }
                x.with_data(data)
            }
            OpKind::Concat => {
                let offset: usize = (0..slot).map(|s| parent(s).cols()).sum();
                let (m, n) = (x.rows(), x.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    data.extend_from_slice(&g.row_slice(r)[offset..offset + n]);
                }
                x.with_data(data)
            }
            OpKind::Reshape { .. } => x.with_data(g.data().to_vec()),
            OpKind::PermuteCols { perm } => {
                let (m, n) = (x.rows(), x.cols());
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let src = g.row_slice(r);
                    for (j, &p) in perm.iter().enumerate() {
                        data[r * n + p] += src[j];
                    }
                }
                x.with_data(data)
            }
            OpKind::Scale(c) => g.map(|v| c * v),
            OpKind::AddScalar(_) => g.clone(),
        };
        Ok(t)
    }
}
