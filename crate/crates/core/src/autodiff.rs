//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Operations are evaluated eagerly as they are recorded, so every node
//! carries its forward value before `backward` runs. The recorded graph can
//! be replayed with new leaf values through [`Tape::forward_eval`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slope of the leaky rectifier on negative inputs.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    AddRowVector,
    Scale(f64),
    Offset(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    ConcatCols,
    SliceCols(usize, usize),
    GatherRows(Vec<usize>),
    RepeatRows(usize),
    BroadcastCols(usize),
    Sum,
    Mean,
    SumRows,
    MeanCols,
    LeakyRelu,
    LeakyReluSlope,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    Clamp(f64, f64),
    LogSumExpRows,
    LogSoftmaxRows,
    SquaredNorm,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRowVector => "add_row_vector",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::MeanCols => "mean_cols",
            Op::LeakyRelu => "leaky_relu",
            Op::LeakyReluSlope => "leaky_relu_slope",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Clamp(..) => "clamp",
            Op::LogSumExpRows => "logsumexp_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::SquaredNorm => "squared_norm",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation graph with cached forward values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if `leaf` is not a leaf of the tape.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, leaf: Var) -> &Tensor {
        self.get(leaf).expect("gradient requested for a non-leaf node")
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn compute(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = |f: fn(f64) -> f64| inputs[0].map(f);
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op.name(), a, b));
            }
            match op {
                Op::Add => a.zip_map(b, |x, y| x + y),
                Op::Sub => a.zip_map(b, |x, y| x - y),
                _ => a.zip_map(b, |x, y| x * y),
            }
        }
        Op::AddRowVector => {
            let (a, b) = (inputs[0], inputs[1]);
            require_matrix(op.name(), a)?;
            if b.len() != a.cols() || b.rank() > 2 || (b.rank() == 2 && b.rows() != 1) {
                return Err(mismatch(op.name(), a, b));
            }
            let c = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % c];
            }
            out
        }
        Op::Scale(s) => {
            let s = *s;
            inputs[0].map(|v| v * s)
        }
        Op::Offset(s) => {
            let s = *s;
            inputs[0].map(|v| v + s)
        }
        Op::MatMul => inputs[0].matmul(inputs[1])?,
        Op::Transpose => {
            require_matrix(op.name(), inputs[0])?;
            inputs[0].transpose()
        }
        Op::Reshape(shape) => {
            let want: usize = shape.iter().product();
            if want != inputs[0].len() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    left: inputs[0].shape().to_vec(),
                    right: shape.clone(),
                });
            }
            inputs[0].reshape(shape)?
        }
        Op::ConcatCols => Tensor::concat_cols(inputs)?,
        Op::SliceCols(start, end) => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            if start > end || *end > a.cols() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    left: a.shape().to_vec(),
                    right: vec![*start, *end],
                });
            }
            a.slice_cols(*start, *end)
        }
        Op::GatherRows(idx) => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    left: a.shape().to_vec(),
                    right: vec![bad],
                });
            }
            a.select_rows(idx)
        }
        Op::RepeatRows(n) => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            let idx: Vec<usize> = (0..a.rows())
                .flat_map(|i| std::iter::repeat_n(i, *n))
                .collect();
            a.select_rows(&idx)
        }
        Op::BroadcastCols(n) => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            if a.cols() != 1 {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    left: a.shape().to_vec(),
                    right: vec![a.rows(), 1],
                });
            }
            let data = a
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, *n))
                .collect();
            Tensor::matrix(a.rows(), *n, data)?
        }
        Op::Sum => Tensor::scalar(inputs[0].sum()),
        Op::Mean => Tensor::scalar(inputs[0].sum() / inputs[0].len() as f64),
        Op::SumRows => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            let data = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
            Tensor::matrix(a.rows(), 1, data)?
        }
        Op::MeanCols => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            let (r, c) = (a.rows(), a.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, &v) in data.iter_mut().zip(a.row(i)) {
                    *d += v;
                }
            }
            for d in &mut data {
                *d /= r as f64;
            }
            Tensor::matrix(1, c, data)?
        }
        Op::LeakyRelu => unary(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
        Op::LeakyReluSlope => unary(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }),
        Op::Tanh => unary(f64::tanh),
        Op::Sigmoid => unary(sigmoid),
        Op::Exp => unary(f64::exp),
        Op::Log => unary(f64::ln),
        Op::Square => unary(|v| v * v),
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            inputs[0].map(|v| v.clamp(lo, hi))
        }
        Op::LogSumExpRows => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            let data = (0..a.rows()).map(|i| row_logsumexp(a.row(i))).collect();
            Tensor::matrix(a.rows(), 1, data)?
        }
        Op::LogSoftmaxRows => {
            let a = inputs[0];
            require_matrix(op.name(), a)?;
            let mut out = a.clone();
            let c = a.cols();
            for i in 0..a.rows() {
                let lse = row_logsumexp(a.row(i));
                for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                    *v -= lse;
                }
            }
            out
        }
        Op::SquaredNorm => Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum()),
    })
}

/// Vector-Jacobian products for each input of `op`.
fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    let x = inputs[0];
    let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    Ok(match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.map(|v| -v)],
        Op::Mul => vec![
            g.zip_map(inputs[1], |a, b| a * b),
            g.zip_map(x, |a, b| a * b),
        ],
        Op::AddRowVector => {
            let c = x.cols();
            let mut gb = vec![0.0; c];
            for i in 0..g.rows() {
                for (d, &v) in gb.iter_mut().zip(g.row(i)) {
                    *d += v;
                }
            }
            vec![g.clone(), Tensor::new(inputs[1].shape().to_vec(), gb)?]
        }
        Op::Scale(s) => {
            let s = *s;
            vec![g.map(|v| v * s)]
        }
        Op::Offset(_) => vec![g.clone()],
        Op::MatMul => {
            let (a, b) = (x, inputs[1]);
            vec![g.matmul(&b.transpose())?, a.transpose().matmul(g)?]
        }
        Op::Transpose => vec![g.transpose()],
        Op::Reshape(_) => vec![g.reshape(x.shape())?],
        Op::ConcatCols => {
            let mut start = 0;
            inputs
                .iter()
                .map(|t| {
                    let part = g.slice_cols(start, start + t.cols());
                    start += t.cols();
                    part
                })
                .collect()
        }
        Op::SliceCols(start, end) => {
            let mut gx = Tensor::zeros(x.shape());
            let (c, w) = (x.cols(), end - start);
            for i in 0..x.rows() {
                gx.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![gx]
        }
        Op::GatherRows(idx) => {
            let mut gx = Tensor::zeros(x.shape());
            let c = x.cols();
            for (r, &i) in idx.iter().enumerate() {
                for (d, &v) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            vec![gx]
        }
        Op::RepeatRows(n) => {
            let mut gx = Tensor::zeros(x.shape());
            let c = x.cols();
            for r in 0..g.rows() {
                let i = r / n;
                for (d, &v) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            vec![gx]
        }
        Op::BroadcastCols(_) => {
            let data = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
            vec![Tensor::matrix(g.rows(), 1, data)?]
        }
        Op::Sum => vec![Tensor::full(x.shape(), g.item())],
        Op::Mean => vec![Tensor::full(x.shape(), g.item() / x.len() as f64)],
        Op::SumRows => {
            let c = x.cols();
            let data = (0..x.len()).map(|k| g.data()[k / c]).collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        Op::MeanCols => {
            let (r, c) = (x.rows(), x.cols());
            let data = (0..x.len()).map(|k| g.data()[k % c] / r as f64).collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        Op::LeakyRelu => vec![elementwise(&|xi, _, gi| if xi > 0.0 { gi } else { LEAKY_SLOPE * gi })],
        // Piecewise constant: zero derivative almost everywhere.
        Op::LeakyReluSlope => vec![Tensor::zeros(x.shape())],
        Op::Tanh => vec![elementwise(&|_, y, gi| gi * (1.0 - y * y))],
        Op::Sigmoid => vec![elementwise(&|_, y, gi| gi * y * (1.0 - y))],
        Op::Exp => vec![elementwise(&|_, y, gi| gi * y)],
        Op::Log => vec![elementwise(&|xi, _, gi| gi / xi)],
        Op::Square => vec![elementwise(&|xi, _, gi| 2.0 * xi * gi)],
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![elementwise(&|xi, _, gi| if xi > lo && xi < hi { gi } else { 0.0 })]
        }
        Op::LogSumExpRows => {
            let c = x.cols();
            let data = (0..x.len())
                .map(|k| {
                    let i = k / c;
                    g.data()[i] * (x.data()[k] - out.data()[i]).exp()
                })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        Op::LogSoftmaxRows => {
            let c = x.cols();
            let mut gx = g.clone();
            for i in 0..x.rows() {
                let gsum: f64 = g.row(i).iter().sum();
                for j in 0..c {
                    let k = i * c + j;
                    gx.data_mut()[k] -= out.data()[k].exp() * gsum;
                }
            }
            vec![gx]
        }
        Op::SquaredNorm => {
            let s = 2.0 * g.item();
            vec![x.map(|v| s * v)]
        }
    })
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, vec![], value, true)
    }

    /// Records a value that is held fixed under differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Constant, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            compute(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = !matches!(op, Op::LeakyReluSlope)
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, inputs, value, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, vec![a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowVector, vec![a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(s), vec![a])
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Offset(s), vec![a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols, parts.to_vec())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(start, end), vec![a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(indices), vec![a])
    }

    /// Repeats each row `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::RepeatRows(n), vec![a])
    }

    /// Widens an `r x 1` column to `r x n` by copying.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(n), vec![a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean, vec![a])
    }

    /// Row sums of a matrix as an `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows, vec![a])
    }

    /// Column means of a matrix as a `1 x c` row.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanCols, vec![a])
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LeakyRelu, vec![a])
    }

    /// Derivative of the leaky rectifier at `a`, treated as a constant.
    pub fn leaky_relu_slope(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LeakyReluSlope, vec![a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log, vec![a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square, vec![a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp(lo, hi), vec![a])
    }

    /// Overflow-safe `log(sum(exp(row)))` for each row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExpRows, vec![a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmaxRows, vec![a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SquaredNorm, vec![a])
    }

    /// Re-evaluates every recorded node with new leaf values and returns the
    /// value of `root`. Unbound leaves keep their current values.
    pub fn forward_eval(&mut self, root: Var, bindings: &[(Var, Tensor)]) -> Result<Tensor> {
        for (var, value) in bindings {
            let node = &mut self.nodes[var.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::NotALeaf);
            }
            if node.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "forward_eval",
                    left: node.value.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            node.value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                compute(&node.op, &vals)?
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Gradient of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = vjp(&node.op, &vals, &node.value, &g)?;
            for (input, delta) in node.inputs.iter().zip(grads) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut adj[input.0], delta);
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf => Some(
                    adj.get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, finite_diff_gradient};

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1., 2., 3.]);
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        assert_eq!(tape.value(f).item(), 14.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1., 2.]);
        let c = tape.constant(Tensor::scalar(3.0));
        let _unused = tape.scale(x, 2.0).unwrap();
        let f = tape.scale(c, 1.0).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 0.]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![0.7, -4.0]).unwrap());
        let a = tape.constant(Tensor::matrix(1, 2, vec![3., -1.]).unwrap());
        let f = tape.matmul(a, x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[3., -1.]);
    }

    #[test]
    fn matmul_shape_rule_and_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        let err = tape.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn logsumexp_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1000., 1000.]).unwrap());
        let l = tape.logsumexp_rows(x).unwrap();
        assert!((tape.value(l).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let big = tape.leaf(Tensor::matrix(1, 3, vec![1e6, -1e6, 1e6]).unwrap());
        let l = tape.logsumexp_rows(big).unwrap();
        assert!(tape.value(l).is_finite());
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.0]);
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1., 2.]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.1]).unwrap());
        let t = tape.tanh(x).unwrap();
        let p = tape.matmul(t, x).unwrap();
        let f = tape.squared_norm(p).unwrap();
        let g1 = tape.backward(f).unwrap();
        let g2 = tape.backward(f).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
    }

    #[test]
    fn forward_eval_replays_with_new_bindings() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1., 2., 3.]);
        let sq = tape.square(x).unwrap();
        let f = tape.sum(sq).unwrap();
        let v = tape.forward_eval(f, &[(x, Tensor::vector(vec![2., 0., 1.]))]).unwrap();
        assert_eq!(v.item(), 5.0);
        assert_eq!(tape.backward(f).unwrap().wrt(x).data(), &[4., 0., 2.]);
        assert!(matches!(tape.forward_eval(f, &[(sq, Tensor::vector(vec![0.; 3]))]), Err(Error::NotALeaf)));
    }

    /// Builds `root` from a single matrix leaf via `build`, then checks the
    /// reverse-mode gradient against central differences.
    fn check_op(input: Tensor, build: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = build(&mut tape, x).unwrap();
        // Reduce with a fixed random-looking weighting so every output entry matters.
        let w: Vec<f64> = (0..tape.value(y).len()).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w.clone()).unwrap());
        let prod = tape.mul(y, wv).unwrap();
        let f = tape.sum(prod).unwrap();
        let analytic = tape.backward(f).unwrap().wrt(x).clone();
        let numeric = finite_diff_gradient(
            |t: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.leaf(t.clone());
                let y = build(&mut tape, x)?;
                Ok(tape.value(y).data().iter().zip(&w).map(|(a, b)| a * b).sum())
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert_close(&analytic, &numeric, 1e-6, 1e-8);
    }

    fn sample() -> Tensor {
        Tensor::matrix(3, 4, vec![0.3, -1.2, 2.0, 0.1, -0.5, 0.8, -0.05, 1.7, 0.9, -2.2, 0.4, -0.6]).unwrap()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        check_op(sample(), |t, x| t.tanh(x));
        check_op(sample(), |t, x| t.sigmoid(x));
        check_op(sample(), |t, x| t.leaky_relu(x));
        check_op(sample(), |t, x| t.exp(x));
        check_op(sample(), |t, x| t.square(x));
        check_op(sample(), |t, x| {
            let e = t.exp(x)?;
            t.log(e)
        });
        check_op(sample(), |t, x| t.clamp(x, -1.0, 1.0));
        check_op(sample(), |t, x| t.scale(x, -2.5));
        check_op(sample(), |t, x| t.offset(x, 3.0));
        check_op(sample(), |t, x| t.transpose(x));
        check_op(sample(), |t, x| t.reshape(x, &[2, 6]));
        check_op(sample(), |t, x| t.logsumexp_rows(x));
        check_op(sample(), |t, x| t.log_softmax_rows(x));
        check_op(sample(), |t, x| t.squared_norm(x));
        check_op(sample(), |t, x| t.mean(x));
        check_op(sample(), |t, x| t.sum_rows(x));
        check_op(sample(), |t, x| t.mean_cols(x));
        check_op(sample(), |t, x| t.slice_cols(x, 1, 3));
        check_op(sample(), |t, x| t.gather_rows(x, vec![2, 0, 2]));
        check_op(sample(), |t, x| t.repeat_rows(x, 3));
        check_op(sample(), |t, x| {
            let s = t.sum_rows(x)?;
            t.broadcast_cols(s, 5)
        });
        check_op(sample(), |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(x, xt)
        });
        check_op(sample(), |t, x| {
            let a = t.tanh(x)?;
            let b = t.mul(a, x)?;
            let c = t.sub(b, x)?;
            t.add(c, a)
        });
        check_op(sample(), |t, x| {
            let s = t.slice_cols(x, 0, 2)?;
            t.concat_cols(&[x, s])
        });
        check_op(sample(), |t, x| {
            let row = t.gather_rows(x, vec![1])?;
            let row = t.reshape(row, &[4])?;
            t.add_row_vector(x, row)
        });
    }
}
