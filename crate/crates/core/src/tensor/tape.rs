use std::cell::RefCell;

use super::{as_matrix, kernels, matrix_dims, numel, Activation, Result, Tensor, TensorError};

/// Probability clamp used by [`Var::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Recorded operation. Inputs are node indices on the owning tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Activate(usize, Activation),
    RowSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Mae(usize, usize),
    Bce {
        probs: usize,
        labels: Vec<f64>,
        mask: Option<Vec<f64>>,
        denom: f64,
    },
    Slice { src: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { src: usize, idx: Vec<usize> },
    OuterAdd { col: usize, row: usize },
    MaxOf { inputs: Vec<usize>, argmax: Vec<u32> },
    ScaleGrad(usize, f64),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward pass. Node order is a topological order,
/// so backward simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    fn push_leaf(&self, t: &Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, cols) = matrix_dims("concat_rows", &first.shape())?;
        let mut rows = 0;
        let mut value = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let node = &nodes[p.id];
                let (r, c) = matrix_dims("concat_rows", &node.shape)?;
                if c != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        left: first.shape(),
                        right: node.shape.clone(),
                    });
                }
                rows += r;
                value.extend_from_slice(&node.value);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        self.push("concat_rows", vec![rows, cols], value, Op::ConcatRows(ids), rg)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (rows, _) = matrix_dims("concat_cols", &first.shape())?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = matrix_dims("concat_cols", &p.shape())?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        {
            let nodes = self.nodes.borrow();
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    value.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        self.push("concat_cols", vec![rows, total], value, Op::ConcatCols(ids), rg)
    }

    /// `out[i][j] = col[i] + row[j]`.
    pub fn outer_add<'t>(&'t self, col: Var<'t>, row: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = (col.numel(), row.numel());
        let value = {
            let nodes = self.nodes.borrow();
            let (cv, rv) = (&nodes[col.id].value, &nodes[row.id].value);
            let mut out = Vec::with_capacity(r * c);
            for a in cv {
                out.extend(rv.iter().map(|b| a + b));
            }
            out
        };
        let rg = self.requires_grad(&[col.id, row.id]);
        self.push(
            "outer_add",
            vec![r, c],
            value,
            Op::OuterAdd {
                col: col.id,
                row: row.id,
            },
            rg,
        )
    }

    /// Elementwise maximum over same-shaped inputs (first index wins ties).
    pub fn max_of<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "max_of",
            msg: "no inputs".into(),
        })?;
        let shape = first.shape();
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let mut value = nodes[first.id].value.clone();
            let mut argmax = vec![0u32; value.len()];
            for (k, p) in parts.iter().enumerate().skip(1) {
                let node = &nodes[p.id];
                if node.shape != shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "max_of",
                        left: shape,
                        right: node.shape.clone(),
                    });
                }
                for (i, &v) in node.value.iter().enumerate() {
                    if v > value[i] {
                        value[i] = v;
                        argmax[i] = k as u32;
                    }
                }
            }
            (value, argmax)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        self.push("max_of", shape, value, Op::MaxOf { inputs: ids, argmax }, rg)
    }

    /// Elementwise sum of same-shaped inputs.
    pub fn sum_of<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut iter = parts.iter();
        let mut acc = *iter.next().ok_or(TensorError::Invalid {
            op: "sum_of",
            msg: "no inputs".into(),
        })?;
        for p in iter {
            acc = acc.add(*p)?;
        }
        Ok(acc)
    }

    /// Elementwise mean of same-shaped inputs.
    pub fn mean_of<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.sum_of(parts)?.scale(1.0 / parts.len() as f64)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value out as a plain tensor.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::from_parts(node.shape.clone(), node.value.clone())
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    /// Records an untracked copy of this value.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(&self.value())
    }

    fn unary(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var<'t>> {
        let rg = self.requires_grad();
        self.tape.push(name, shape, value, op, rg)
    }

    fn same_shape(&self, name: &'static str, other: &Var<'t>) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        name: &'static str,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_shape(name, &other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(&nodes[other.id].value)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        self.tape.push(name, self.shape(), value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (ls, rs) = (self.shape(), other.shape());
        let (r, k) = matrix_dims("matmul", &ls)?;
        let (k2, c) = matrix_dims("matmul", &rs)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ls,
                right: rs,
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(&nodes[self.id].value, &nodes[other.id].value, r, k, c)
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        self.tape
            .push("matmul", vec![r, c], value, Op::MatMul(self.id, other.id), rg)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = matrix_dims("transpose", &self.shape())?;
        let value = kernels::transpose(&self.tape.nodes.borrow()[self.id].value, r, c);
        self.unary("transpose", vec![c, r], value, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with("add", other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with("sub", other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with("mul", other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.id]
            .value
            .iter()
            .map(|v| v * s)
            .collect();
        self.unary("scale", self.shape(), value, Op::Scale(self.id, s))
    }

    /// Adds a length-`c` bias to every row of an r×c matrix.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (r, c) = matrix_dims("add_bias", &shape)?;
        if bias.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: shape,
                right: bias.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let mut out = x.clone();
            for i in 0..r {
                for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                    *o += bv;
                }
            }
            out
        };
        let rg = self.tape.requires_grad(&[self.id, bias.id]);
        self.tape
            .push("add_bias", shape, value, Op::AddBias(self.id, bias.id), rg)
    }

    pub fn activate(&self, kind: Activation) -> Result<Var<'t>> {
        if kind == Activation::Identity {
            return Ok(*self);
        }
        let value = self.tape.nodes.borrow()[self.id]
            .value
            .iter()
            .map(|&v| kind.apply(v))
            .collect();
        self.unary("activate", self.shape(), value, Op::Activate(self.id, kind))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.activate(Activation::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.activate(Activation::Relu)
    }

    /// Softmax over each row restricted to entries where `mask` is 1.
    /// Masked entries come out as exactly 0.
    pub fn row_softmax(&self, mask: &Tensor) -> Result<Var<'t>> {
        let shape = self.shape();
        let (r, c) = matrix_dims("row_softmax", &shape)?;
        if mask.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "row_softmax",
                left: shape,
                right: mask.shape().to_vec(),
            });
        }
        let m = mask.data();
        if let Some(bad) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(TensorError::Invalid {
                op: "row_softmax",
                msg: format!("mask entry {bad} is not 0 or 1"),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mrow = &m[i * c..(i + 1) * c];
                let max = row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &mk)| mk == 1.0)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateRow { row: i });
                }
                let mut z = 0.0;
                for j in 0..c {
                    if mrow[j] == 1.0 {
                        let e = (row[j] - max).exp();
                        out[i * c + j] = e;
                        z += e;
                    }
                }
                for v in &mut out[i * c..(i + 1) * c] {
                    *v /= z;
                }
            }
            out
        };
        self.unary("row_softmax", shape, value, Op::RowSoftmax(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.tape.nodes.borrow()[self.id].value.iter().sum();
        self.unary("sum", vec![], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let (s, n) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (v.iter().sum::<f64>(), v.len())
        };
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        self.unary("mean", vec![], vec![s / n as f64], Op::Mean(self.id))
    }

    /// Mean squared elementwise difference.
    pub fn mse_loss(&self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_shape("mse_loss", &target)?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (p, t) = (&nodes[self.id].value, &nodes[target.id].value);
            let n = p.len().max(1) as f64;
            p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
        };
        let rg = self.tape.requires_grad(&[self.id, target.id]);
        self.tape
            .push("mse_loss", vec![], vec![v], Op::Mse(self.id, target.id), rg)
    }

    /// Mean absolute elementwise difference.
    pub fn mae_loss(&self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_shape("mae_loss", &target)?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (p, t) = (&nodes[self.id].value, &nodes[target.id].value);
            let n = p.len().max(1) as f64;
            p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
        };
        let rg = self.tape.requires_grad(&[self.id, target.id]);
        self.tape
            .push("mae_loss", vec![], vec![v], Op::Mae(self.id, target.id), rg)
    }

    /// Binary cross entropy averaged over all entries. Probabilities are
    /// clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&self, labels: &Tensor) -> Result<Var<'t>> {
        self.bce_impl(labels, None)
    }

    /// Binary cross entropy averaged over entries where `mask` is nonzero.
    pub fn bce_loss_masked(&self, labels: &Tensor, mask: &Tensor) -> Result<Var<'t>> {
        self.bce_impl(labels, Some(mask))
    }

    fn bce_impl(&self, labels: &Tensor, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let shape = self.shape();
        for other in std::iter::once(labels).chain(mask) {
            if other.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_loss",
                    left: shape,
                    right: other.shape().to_vec(),
                });
            }
        }
        if let Some(&bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::InvalidLabel { value: bad });
        }
        let mask = mask.map(|m| m.data().to_vec());
        let denom = match &mask {
            Some(m) => m.iter().sum::<f64>(),
            None => labels.numel() as f64,
        };
        if denom <= 0.0 {
            return Err(TensorError::Invalid {
                op: "bce_loss",
                msg: "no supervised entries".into(),
            });
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id].value;
            let mut acc = 0.0;
            for (i, (&pi, &y)) in p.iter().zip(labels.data()).enumerate() {
                let w = mask.as_ref().map_or(1.0, |m| m[i]);
                if w == 0.0 {
                    continue;
                }
                let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                acc -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            }
            acc / denom
        };
        self.unary(
            "bce_loss",
            vec![],
            vec![v],
            Op::Bce {
                probs: self.id,
                labels: labels.data().to_vec(),
                mask,
                denom,
            },
        )
    }

    /// Contiguous flat slice of `numel(shape)` values starting at `start`,
    /// reshaped to `shape`.
    pub fn slice(&self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let len = numel(shape);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if start + len > v.len() {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!("range {start}..{} exceeds {} values", start + len, v.len()),
                });
            }
            v[start..start + len].to_vec()
        };
        self.unary(
            "slice",
            shape.to_vec(),
            value,
            Op::Slice {
                src: self.id,
                start,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        self.slice(0, shape)
    }

    /// Selects rows `idx` (repeats allowed) of a matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (r, c) = matrix_dims("gather_rows", &self.shape())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {r} rows"),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            out
        };
        self.unary(
            "gather_rows",
            vec![idx.len(), c],
            value,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(&idx)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn scale_grad(&self, factor: f64) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.id].value.clone();
        self.unary("scale_grad", self.shape(), value, Op::ScaleGrad(self.id, factor))
    }

    /// Reverse pass from a single-element loss. Every tracked node reachable
    /// from the loss receives its accumulated gradient.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (r, k) = as_matrix(&nodes[*a].shape);
            let (_, c) = as_matrix(&nodes[*b].shape);
            if nodes[*a].requires_grad {
                let ga = kernels::matmul_bt(g, &nodes[*b].value, r, c, k);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul_at(&nodes[*a].value, g, r, k, c);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = as_matrix(&node.shape);
            accumulate(grads, nodes, *a, kernels::transpose(g, r, c));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * s).collect());
        }
        Op::ScaleGrad(a, s) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * s).collect());
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let c = nodes[*b].value.len();
            accumulate_with(grads, nodes, *b, |gb| {
                for row in g.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            });
        }
        Op::Activate(a, kind) => {
            let x = &nodes[*a].value;
            let y = &node.value;
            let ga = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::RowSoftmax(a) => {
            let (r, c) = as_matrix(&node.shape);
            let y = &node.value;
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    ga[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::Mse(a, b) => {
            let (p, t) = (&nodes[*a].value, &nodes[*b].value);
            let k = 2.0 * g[0] / p.len().max(1) as f64;
            let d: Vec<f64> = p.iter().zip(t).map(|(x, y)| k * (x - y)).collect();
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, d.iter().map(|v| -v).collect());
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Mae(a, b) => {
            let (p, t) = (&nodes[*a].value, &nodes[*b].value);
            let k = g[0] / p.len().max(1) as f64;
            let d: Vec<f64> = p
                .iter()
                .zip(t)
                .map(|(x, y)| k * signum0(x - y))
                .collect();
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, d.iter().map(|v| -v).collect());
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Bce {
            probs,
            labels,
            mask,
            denom,
        } => {
            let p = &nodes[*probs].value;
            let ga = p
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&pi, &y))| {
                    let w = mask.as_ref().map_or(1.0, |m| m[i]);
                    if w == 0.0 || pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                        return 0.0;
                    }
                    -g[0] * w * (y / pi - (1.0 - y) / (1.0 - pi)) / denom
                })
                .collect();
            accumulate(grads, nodes, *probs, ga);
        }
        Op::Slice { src, start } => {
            let start = *start;
            accumulate_with(grads, nodes, *src, |gs| {
                for (o, v) in gs[start..start + g.len()].iter_mut().zip(g) {
                    *o += v;
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let n = nodes[id].value.len();
                accumulate(grads, nodes, id, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(ids) => {
            let (rows, total) = as_matrix(&node.shape);
            let mut col0 = 0;
            for &id in ids {
                let w = as_matrix(&nodes[id].shape).1;
                let mut part = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    part.extend_from_slice(&g[r * total + col0..r * total + col0 + w]);
                }
                accumulate(grads, nodes, id, part);
                col0 += w;
            }
        }
        Op::GatherRows { src, idx } => {
            let c = as_matrix(&node.shape).1;
            accumulate_with(grads, nodes, *src, |gs| {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gs[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
            });
        }
        Op::OuterAdd { col, row } => {
            let (r, c) = as_matrix(&node.shape);
            accumulate_with(grads, nodes, *col, |gc| {
                for i in 0..r {
                    gc[i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                }
            });
            accumulate_with(grads, nodes, *row, |gr| {
                for i in 0..r {
                    for (o, v) in gr.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
            });
        }
        Op::MaxOf { inputs, argmax } => {
            for (k, &id) in inputs.iter().enumerate() {
                let part = g
                    .iter()
                    .zip(argmax)
                    .map(|(&v, &am)| if am as usize == k { v } else { 0.0 })
                    .collect();
                accumulate(grads, nodes, id, part);
            }
        }
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients produced by [`Var::backward`], indexed by tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, with zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
    }

    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        Tensor::from_parts(var.shape(), self.get_or_zeros(var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_records_product() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = tape.constant(&Tensor::from_rows(&[&[3.0], &[4.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
        let c = tape.constant(&Tensor::zeros(vec![3, 1]));
        assert!(matches!(a.matmul(c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn row_softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_rows(&[&[0.0, 0.0]]));
        let y = x.row_softmax(&Tensor::ones(vec![1, 2])).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);

        let x = tape.constant(&Tensor::from_rows(&[&[10.0, 10.0, 10.0]]));
        let y = x
            .row_softmax(&Tensor::from_rows(&[&[1.0, 0.0, 1.0]]))
            .unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.0, 0.5]);

        let x = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0]]));
        let y = x.row_softmax(&Tensor::ones(vec![1, 2])).unwrap().value();
        // scalar softmax oracle
        let e1 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        assert!(approx(y.data()[0], e1 / (e1 + e2), 1e-12));
        assert!(approx(y.data()[0], 0.26894, 1e-5));
        assert!(approx(y.data()[1], 0.73106, 1e-5));
    }

    #[test]
    fn row_softmax_rejects_fully_masked_row() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 2]));
        let mask = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(
            x.row_softmax(&mask).unwrap_err(),
            TensorError::DegenerateRow { row: 1 }
        );
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = tape.constant(&Tensor::new(vec![3], vec![2.0, 2.0, 5.0]).unwrap());
        assert!(approx(p.mse_loss(t).unwrap().item(), 5.0 / 3.0, 1e-15));
        assert_eq!(p.mse_loss(p).unwrap().item(), 0.0);
        let z = tape.constant(&Tensor::zeros(vec![2]));
        let o = tape.constant(&Tensor::ones(vec![2]));
        assert_eq!(z.mse_loss(o).unwrap().item(), 1.0);
        assert!(p.mse_loss(z).is_err());
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let ones = Tensor::ones(vec![2, 2]);
        let p = tape.constant(&ones);
        assert!(p.bce_loss(&ones).unwrap().item() <= 1.2e-7);

        let half = tape.constant(&Tensor::new(vec![3], vec![0.5; 3]).unwrap());
        let y = Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(approx(half.bce_loss(&y).unwrap().item(), 2f64.ln(), 1e-12));

        let p = tape.constant(&Tensor::new(vec![2], vec![0.9, 0.2]).unwrap());
        let y = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let got = p.bce_loss(&y).unwrap().item();
        assert!(approx(got, expected, 1e-12));
        assert!(approx(got, 0.164252, 1e-6));

        let bad = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert_eq!(
            p.bce_loss(&bad).unwrap_err(),
            TensorError::InvalidLabel { value: 0.5 }
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let g = x.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_linear_chain_rule() {
        // loss = (w x - y)^2, grad_w = 2 (w x - y) x = 6 at w=2, x=3, y=5
        let tape = Tape::new();
        let w = tape.param(&Tensor::from_rows(&[&[2.0]]));
        let x = tape.constant(&Tensor::from_rows(&[&[3.0]]));
        let y = tape.constant(&Tensor::from_rows(&[&[5.0]]));
        let loss = w.matmul(x).unwrap().mse_loss(y).unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(w).unwrap(), &[6.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_fan_out_sums_paths() {
        // f = sum(x * x + 3 x): df/dx = 2x + 3
        let tape = Tape::new();
        let xv = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = tape.param(&xv);
        let sq = x.mul(x).unwrap();
        let lin = x.scale(3.0).unwrap();
        let f = sq.add(lin).unwrap().sum().unwrap();
        let g = f.backward().unwrap();
        let expected: Vec<f64> = xv.data().iter().map(|v| 2.0 * v + 3.0).collect();
        assert_eq!(g.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::ones(vec![2]));
        assert!(matches!(
            x.backward(),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1], vec![1e308]).unwrap());
        assert_eq!(
            x.scale(10.0).unwrap_err(),
            TensorError::NonFinite { op: "scale" }
        );
    }

    #[test]
    fn scale_grad_is_forward_identity() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = x.scale_grad(1.5).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.5, 1.5]);
    }
}
