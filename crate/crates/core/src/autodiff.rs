//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is built eagerly: every builder call evaluates its node and
//! appends it, so node inputs always precede the node. [`Tape::forward`]
//! replays the recorded graph on new input tensors and [`Tape::backward`]
//! returns gradients of the terminal scalar for every parameter leaf.
//!
//! Parameters are either trainable or frozen. Frozen parameters receive an
//! all-zero gradient and nothing upstream of them is differentiated, which
//! is how the trainer optimises the backbone and the classifier separately.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::tensor::{matmul, matmul_at, matmul_bt};
use crate::{Error, Result, Tensor};

/// Position of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leaf {
    /// Replaced positionally by [`Tape::forward`].
    Input,
    Param { trainable: bool },
    Constant,
}

/// Exponent of a power node. Always a constant: no gradient flows into it.
#[derive(Debug, Clone, PartialEq)]
pub enum Exponent {
    Uniform(f64),
    /// One exponent per element, row-major.
    PerElement(Vec<f64>),
}

impl Exponent {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Self::Uniform(e) => *e,
            Self::PerElement(es) => es[i],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Leaf),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `n×m` plus a `1×m` row broadcast to every row.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    Pow(NodeId, Exponent),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    RowSoftmax(NodeId),
    /// `n×m` to `n×1`.
    RowMean(NodeId),
    /// Any shape to `1×1`.
    Sum(NodeId),
    /// Picks `(row, col)` entries into a `k×1` column.
    Gather(NodeId, Vec<(usize, usize)>),
    /// Mean over `(row, class)` targets of `-log softmax(logits[row])[class]`.
    SoftmaxCrossEntropy(NodeId, Vec<(usize, usize)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Relu(_) => "relu",
            Op::Ln(_) => "ln",
            Op::ClampMin(..) => "clamp_min",
            Op::Pow(..) => "pow",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowMean(_) => "row_mean",
            Op::Sum(_) => "sum",
            Op::Gather(..) => "gather",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }

    fn operands(&self) -> (Option<NodeId>, Option<NodeId>) {
        match self {
            Op::Leaf(_) => (None, None),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                (Some(*a), Some(*b))
            }
            Op::Relu(a)
            | Op::Ln(a)
            | Op::ClampMin(a, _)
            | Op::Pow(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::RowSoftmax(a)
            | Op::RowMean(a)
            | Op::Sum(a)
            | Op::Gather(a, _)
            | Op::SoftmaxCrossEntropy(a, _) => (Some(*a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One parameter entry's analytic derivative next to its central difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    pub param: NodeId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradComparison {
    /// `|a - n| / max(floor, |a| + |n|)`.
    ///
    /// Central differences carry a rounding error of roughly `ε·|f| / step`,
    /// so for entries much smaller than that the plain ratio measures noise;
    /// `floor` turns the check into an absolute one there.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let (a, n) = (self.analytic, self.numeric);
        (a - n).abs() / f64::max(floor, a.abs() + n.abs())
    }
}

/// Recorded computation. See the module docs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
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

    /// The most recently added node.
    pub fn terminal(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode { node: id.0 })
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        v.as_scalar().ok_or(Error::NotScalar {
            node: id.0,
            shape: v.shape(),
        })
    }

    /// Ids of all parameter leaves, in tape order.
    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(Leaf::Param { .. })))
            .map(|(i, _)| NodeId(i))
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(
            self.nodes.get(id.0).map(|n| &n.op),
            Some(Op::Leaf(Leaf::Param { trainable: true }))
        )
    }

    // ---- leaves ----

    /// A leaf replaced by the next [`Tape::forward`] call, in declaration order.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        let id = self.push_leaf(Leaf::Input, value)?;
        self.inputs.push(id);
        Ok(id)
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Leaf::Param { trainable: true }, value)
    }

    /// A parameter that reports a zero gradient and blocks backpropagation.
    pub fn frozen_param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Leaf::Param { trainable: false }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Leaf::Constant, value)
    }

    fn push_leaf(&mut self, leaf: Leaf, value: Tensor) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id.0 });
        }
        self.nodes.push(Node {
            op: Op::Leaf(leaf),
            value,
        });
        Ok(id)
    }

    /// Overwrites a parameter leaf and recomputes everything downstream.
    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or(Error::UnknownNode { node: id.0 })?;
        if !matches!(node.op, Op::Leaf(Leaf::Param { .. })) {
            return Err(Error::invalid("node", "not a parameter leaf"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                node: id.0,
                op: "set_param",
                left: node.value.shape(),
                right: value.shape(),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id.0 });
        }
        node.value = value;
        self.recompute_from(id.0 + 1)
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, bias))
    }

    /// Gradient at exactly zero is zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Ln(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.push(Op::ClampMin(a, floor))
    }

    /// Elementwise `a^e` with a constant exponent.
    ///
    /// At `a == 0` the derivative is taken as `e` when `e == 1` and zero
    /// otherwise, which keeps `(1 - p)^γ` finite for `p == 1`.
    pub fn pow(&mut self, a: NodeId, exponent: Exponent) -> Result<NodeId> {
        self.push(Op::Pow(a, exponent))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, k))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowSoftmax(a))
    }

    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowMean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn gather(&mut self, a: NodeId, entries: Vec<(usize, usize)>) -> Result<NodeId> {
        self.push(Op::Gather(a, entries))
    }

    /// Fused log-softmax and negative log-likelihood, averaged over `targets`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy(logits, targets))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.eval(id, &op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    // ---- forward ----

    /// Replays the tape with new values for the input leaves and returns the
    /// terminal value.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<&Tensor> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::InputCount {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        for (id, t) in self.inputs.iter().zip(inputs) {
            let declared = self.nodes[id.0].value.shape();
            if declared != t.shape() {
                return Err(Error::ShapeMismatch {
                    node: id.0,
                    op: "input",
                    left: declared,
                    right: t.shape(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { node: id.0 });
            }
        }
        for (id, t) in self.inputs.clone().into_iter().zip(inputs) {
            self.nodes[id.0].value.clone_from(t);
        }
        self.recompute_from(0)?;
        let last = self.terminal().ok_or(Error::EmptySet { what: "tape" })?;
        self.value(last)
    }

    fn recompute_from(&mut self, start: usize) -> Result<()> {
        for i in start..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            // Take the op out so `eval` can borrow the tape immutably.
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf(Leaf::Constant));
            let result = self.eval(i, &op);
            self.nodes[i].op = op;
            self.nodes[i].value = result?;
        }
        Ok(())
    }

    fn operand(&self, node: usize, id: NodeId) -> Result<&Tensor> {
        if id.0 >= node {
            return Err(Error::UnknownNode { node: id.0 });
        }
        Ok(&self.nodes[id.0].value)
    }

    fn eval(&self, node: usize, op: &Op) -> Result<Tensor> {
        let mismatch = |l: &Tensor, r: &Tensor| Error::ShapeMismatch {
            node,
            op: op.name(),
            left: l.shape(),
            right: r.shape(),
        };
        let out = match op {
            Op::Leaf(_) => return Err(Error::Internal("leaf evaluated as an operation")),
            Op::MatMul(a, b) => {
                let (a, b) = (self.operand(node, *a)?, self.operand(node, *b)?);
                if a.cols() != b.rows() {
                    return Err(mismatch(a, b));
                }
                matmul(a, b)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.operand(node, *a)?, self.operand(node, *b)?);
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    _ => |x, y| x * y,
                };
                zip_map(a, b, f)
            }
            Op::AddRow(a, bias) => {
                let (a, bias) = (self.operand(node, *a)?, self.operand(node, *bias)?);
                if bias.rows() != 1 || bias.cols() != a.cols() {
                    return Err(mismatch(a, bias));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Relu(a) => map(self.operand(node, *a)?, |x| if x > 0.0 { x } else { 0.0 }),
            Op::Ln(a) => map(self.operand(node, *a)?, math::ln),
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                map(self.operand(node, *a)?, |x| if x < floor { floor } else { x })
            }
            Op::Pow(a, e) => {
                let a = self.operand(node, *a)?;
                if let Exponent::PerElement(es) = e {
                    if es.len() != a.len() {
                        return Err(Error::ShapeMismatch {
                            node,
                            op: "pow",
                            left: a.shape(),
                            right: (es.len(), 1),
                        });
                    }
                }
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| math::powf(x, e.at(i)))
                    .collect();
                Tensor::new(a.rows(), a.cols(), data)?
            }
            Op::Scale(a, k) => {
                let k = *k;
                map(self.operand(node, *a)?, |x| x * k)
            }
            Op::AddScalar(a, k) => {
                let k = *k;
                map(self.operand(node, *a)?, |x| x + k)
            }
            Op::RowSoftmax(a) => {
                let a = self.operand(node, *a)?;
                let mut out = a.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
            Op::RowMean(a) => {
                let a = self.operand(node, *a)?;
                if a.cols() == 0 {
                    return Err(Error::EmptySet { what: "row_mean input" });
                }
                let data = (0..a.rows())
                    .map(|r| a.row(r).iter().sum::<f64>() / a.cols() as f64)
                    .collect();
                Tensor::new(a.rows(), 1, data)?
            }
            Op::Sum(a) => Tensor::scalar(self.operand(node, *a)?.data().iter().sum()),
            Op::Gather(a, entries) => {
                let a = self.operand(node, *a)?;
                let mut data = Vec::with_capacity(entries.len());
                for &(r, c) in entries {
                    check_entry(a, r, c)?;
                    data.push(a.get(r, c));
                }
                Tensor::new(entries.len(), 1, data)?
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let logits = self.operand(node, *logits)?;
                if targets.is_empty() {
                    return Err(Error::EmptySet {
                        what: "cross-entropy targets",
                    });
                }
                let mut total = 0.0;
                for &(r, c) in targets {
                    check_entry(logits, r, c)?;
                    let row = logits.row(r);
                    total += log_sum_exp(row) - row[c];
                }
                Tensor::scalar(total / targets.len() as f64)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { node });
        }
        Ok(out)
    }

    // ---- backward ----

    /// Gradients of the terminal node.
    pub fn backward(&self) -> Result<GradientSet> {
        let last = self.terminal().ok_or(Error::EmptySet { what: "tape" })?;
        self.backward_from(last)
    }

    /// Gradients of an arbitrary scalar node.
    pub fn backward_from(&self, output: NodeId) -> Result<GradientSet> {
        Ok(self.backward_with_taps(output, &[])?.0)
    }

    /// Like [`Tape::backward_from`], additionally returning the adjoint of
    /// each `tap` node (zeros where the output does not depend on it).
    pub fn backward_with_taps(
        &self,
        output: NodeId,
        taps: &[NodeId],
    ) -> Result<(GradientSet, Vec<Tensor>)> {
        let out_value = self.value(output)?;
        if out_value.shape() != (1, 1) {
            return Err(Error::NotScalar {
                node: output.0,
                shape: out_value.shape(),
            });
        }
        for t in taps {
            self.value(*t)?;
        }

        let len = output.0 + 1;
        let mut needs = vec![false; len];
        for i in 0..len {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf(Leaf::Param { trainable }) => *trainable,
                Op::Leaf(_) => false,
                op => {
                    let (a, b) = op.operands();
                    a.is_some_and(|a| needs[a.0]) || b.is_some_and(|b| needs[b.0])
                }
            };
        }
        for t in taps {
            if t.0 < len {
                needs[t.0] = true;
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; len];
        adj[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..len).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &needs, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads = BTreeMap::new();
        for id in self.params() {
            let shape = self.nodes[id.0].value.shape();
            let g = match (self.is_trainable(id), adj.get(id.0)) {
                (true, Some(Some(g))) => g.clone(),
                _ => Tensor::zeros(shape.0, shape.1),
            };
            grads.insert(id, g);
        }
        let tapped = taps
            .iter()
            .map(|t| match adj.get(t.0) {
                Some(Some(g)) => g.clone(),
                _ => {
                    let (r, c) = self.nodes[t.0].value.shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect();
        Ok((GradientSet { grads }, tapped))
    }

    fn propagate(&self, i: usize, g: &Tensor, needs: &[bool], adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut send = |id: NodeId, contribution: Tensor| {
            if !needs[id.0] {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                if needs[a.0] {
                    send(*a, matmul_bt(g, val(*b)));
                }
                if needs[b.0] {
                    send(*b, matmul_at(val(*a), g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    send(*a, zip_map(g, val(*b), |x, y| x * y));
                }
                if needs[b.0] {
                    send(*b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                if needs[bias.0] {
                    let mut col = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, v) in col.data_mut().iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    send(*bias, col);
                }
            }
            Op::Relu(a) => send(
                *a,
                zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Ln(a) => send(*a, zip_map(g, val(*a), |g, x| g / x)),
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                send(
                    *a,
                    zip_map(g, val(*a), |g, x| if x < floor { 0.0 } else { g }),
                )
            }
            Op::Pow(a, e) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .enumerate()
                    .map(|(k, (&g, &x))| g * pow_derivative(x, e.at(k)))
                    .collect();
                send(*a, Tensor::new(x.rows(), x.cols(), data).expect("shape"));
            }
            Op::Scale(a, k) => {
                let k = *k;
                send(*a, map(g, |x| x * k));
            }
            Op::AddScalar(a, _) => send(*a, g.clone()),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                send(*a, out);
            }
            Op::RowMean(a) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                let inv = 1.0 / x.cols() as f64;
                for r in 0..x.rows() {
                    let v = g.get(r, 0) * inv;
                    out.row_mut(r).iter_mut().for_each(|o| *o = v);
                }
                send(*a, out);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Gather(a, entries) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for (k, &(row, col)) in entries.iter().enumerate() {
                    out.data_mut()[row * c + col] += g.data()[k];
                }
                send(*a, out);
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let z = val(*logits);
                let scale = g.data()[0] / targets.len() as f64;
                let mut out = Tensor::zeros(z.rows(), z.cols());
                let mut probs = vec![0.0; z.cols()];
                for &(r, c) in targets {
                    probs.copy_from_slice(z.row(r));
                    softmax_in_place(&mut probs);
                    let row = out.row_mut(r);
                    for (o, p) in row.iter_mut().zip(&probs) {
                        *o += scale * p;
                    }
                    row[c] -= scale;
                }
                send(*logits, out);
            }
        }
    }

    /// Smallest `|x|` over all ReLU inputs; finite-difference checks are only
    /// meaningful when this is comfortably larger than the step.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest relative disagreement between [`Tape::backward`] and central
    /// differences of the terminal node, over every trainable parameter entry,
    /// with denominators floored at `floor` (see [`GradComparison`]).
    pub fn grad_check(&mut self, inputs: &[Tensor], step: f64, floor: f64) -> Result<f64> {
        Ok(self
            .grad_compare(inputs, step)?
            .iter()
            .map(|c| c.relative_error(floor))
            .fold(0.0, f64::max))
    }

    /// Analytic and central-difference derivatives for every trainable
    /// parameter entry, in tape order.
    pub fn grad_compare(&mut self, inputs: &[Tensor], step: f64) -> Result<Vec<GradComparison>> {
        if !(step > 0.0) {
            return Err(Error::invalid("step", "must be positive"));
        }
        self.forward(inputs)?;
        let output = self.terminal().ok_or(Error::EmptySet { what: "tape" })?;
        let grads = self.backward_from(output)?;
        let mut out = Vec::new();
        let params: Vec<NodeId> = self.params().filter(|p| self.is_trainable(*p)).collect();
        for p in params {
            let analytic = grads.get(p).ok_or(Error::Internal("missing gradient"))?.clone();
            for k in 0..analytic.len() {
                let original = self.nodes[p.0].value.data()[k];
                let f_plus = self.perturbed(p, k, original + step, output)?;
                let f_minus = self.perturbed(p, k, original - step, output)?;
                self.nodes[p.0].value.data_mut()[k] = original;
                out.push(GradComparison {
                    param: p,
                    index: k,
                    analytic: analytic.data()[k],
                    numeric: (f_plus - f_minus) / (2.0 * step),
                });
            }
        }
        self.recompute_from(0)?;
        Ok(out)
    }

    fn perturbed(&mut self, p: NodeId, k: usize, value: f64, output: NodeId) -> Result<f64> {
        self.nodes[p.0].value.data_mut()[k] = value;
        self.recompute_from(p.0 + 1)?;
        self.scalar(output)
    }
}

/// Free-function form of [`Tape::forward`].
pub fn forward<'t>(tape: &'t mut Tape, inputs: &[Tensor]) -> Result<&'t Tensor> {
    tape.forward(inputs)
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape) -> Result<GradientSet> {
    tape.backward()
}

/// Free-function form of [`Tape::grad_check`].
pub fn grad_check(tape: &mut Tape, inputs: &[Tensor], step: f64, floor: f64) -> Result<f64> {
    tape.grad_check(inputs, step, floor)
}

fn check_entry(t: &Tensor, r: usize, c: usize) -> Result<()> {
    if r >= t.rows() {
        return Err(Error::OutOfRange {
            what: "row",
            value: r,
            bound: t.rows(),
        });
    }
    if c >= t.cols() {
        return Err(Error::OutOfRange {
            what: "column",
            value: c,
            bound: t.cols(),
        });
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn pow_derivative(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else if x == 0.0 {
        if e == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        e * math::powf(x, e - 1.0)
    }
}

/// Numerically stable softmax with row-max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>())
}
