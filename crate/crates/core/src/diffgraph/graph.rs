//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Gradients are emitted as ordinary graph nodes, so a gradient can itself be
//! differentiated. That is what lets the shift-generator training loop push
//! gradients through its inner gradient-descent step without any special
//! machinery: the inner step is just `sub(v, scale(grad_node, eta))`.
//!
//! Graphs are built per batch and thrown away. A graph is confined to one
//! thread; finished parameter tensors are plain data and can be shared
//! read-only.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use super::tensor::{self, Tensor};

/// Handle to a node inside one [`Graph`]. Creation order is topological.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row lookup plan for gather/scatter: each output row is a weighted sum
/// of table rows. A single-index lookup is a one-entry group with weight 1;
/// a mean-pooled multi-valued lookup uses weight 1/k.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    pub groups: Vec<Vec<(u32, f64)>>,
}

impl GatherPlan {
    /// Plain row lookup, one index per output row.
    pub fn lookup(indices: &[u32]) -> Self {
        Self {
            groups: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Mean-pooling lookup: each output row averages the given index set.
    /// Empty groups produce a zero row.
    pub fn mean_pool(index_sets: &[Vec<u32>]) -> Self {
        Self {
            groups: index_sets
                .iter()
                .map(|set| {
                    let w = if set.is_empty() { 0.0 } else { 1.0 / set.len() as f64 };
                    set.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.groups.len()
    }

    fn max_index(&self) -> Option<u32> {
        self.groups
            .iter()
            .flat_map(|g| g.iter().map(|&(i, _)| i))
            .max()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Matmul,
    Add,
    /// Matrix plus a 1×n row broadcast over every row.
    AddRow,
    Sub,
    Mul,
    Div,
    Scale(f64),
    /// Column-wise concatenation; offsets record the segment boundaries.
    Concat { offsets: Vec<usize> },
    SliceCols { start: usize, width: usize },
    Relu,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Mean,
    Sum,
    /// Binary cross entropy of (predictions, labels); labels are constant.
    Bce,
    Transpose,
    /// Scalar broadcast to a fixed shape.
    Broadcast { shape: Vec<usize> },
    Gather { plan: Rc<GatherPlan> },
    Scatter { plan: Rc<GatherPlan>, vocab: usize },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Bce => "bce",
            Op::Transpose => "transpose",
            Op::Broadcast { .. } => "broadcast",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} (op {op}{name}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        name: String,
        detail: String,
    },
    #[error("missing feed for input node {node}{name}")]
    MissingFeed { node: usize, name: String },
    #[error("input node {node}{name} is already bound")]
    AlreadyBound { node: usize, name: String },
    #[error("node {node} is not an input and cannot be fed")]
    NotAnInput { node: usize },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("node {node} has no value; run forward first")]
    NotEvaluated { node: usize },
    #[error("gather index {index} out of range for table with {vocab} rows")]
    GatherOutOfRange { index: u32, vocab: usize },
}

fn name_suffix(name: &Option<String>) -> String {
    match name {
        Some(n) => format!(" '{n}'"),
        None => String::new(),
    }
}

/// Gradients of one backward pass: node id → gradient node id.
///
/// Every `requires_grad` node reachable from the loss appears exactly once;
/// unreachable parameters are mapped to zero tensors of matching shape.
pub struct GradientMap {
    grads: HashMap<NodeId, NodeId>,
}

impl GradientMap {
    pub fn node(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(&id).copied()
    }

    pub fn tensor<'g>(&self, graph: &'g Graph, id: NodeId) -> Option<&'g Tensor> {
        self.grads.get(&id).and_then(|&gid| graph.value(gid))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// The node arena. See the module docs for the evaluation model.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value-less input; must be bound through `forward` feeds.
    pub fn placeholder(&mut self, shape: &[usize], name: &str) -> NodeId {
        self.push(Node {
            op: Op::Input,
            parents: vec![],
            shape: shape.to_vec(),
            value: None,
            requires_grad: false,
            name: Some(name.to_string()),
        })
    }

    /// A leaf carrying a value that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, None)
    }

    /// A leaf carrying a value that accumulates gradients.
    pub fn param(&mut self, value: Tensor, name: &str) -> NodeId {
        self.leaf(value, true, Some(name.to_string()))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, name: Option<String>) -> NodeId {
        self.push(Node {
            op: Op::Input,
            parents: vec![],
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad,
            name,
        })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn set_name(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].name = Some(name.to_string());
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            name: String::new(),
            detail,
        }
    }

    fn push_op(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        let value = if parents.iter().all(|&p| self.nodes[p.0].value.is_some()) {
            Some(self.compute(&op, &parents))
        } else {
            None
        };
        self.push(Node {
            op,
            parents,
            shape,
            value,
            requires_grad,
            name: None,
        })
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), GraphError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(self.mismatch(op, format!("node {} has rank-{} shape {s:?}, need rank 2", id.0, s.len())));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        Ok(self.push_op(Op::Matmul, vec![a, b], vec![m, n]))
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            let tag = op.tag();
            return Err(self.mismatch(
                tag,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_op(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape(Op::Div, a, b)
    }

    /// `a` is m×n, `row` is 1×n, added to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.rank2(a, "add_row")?;
        let (r, n2) = self.rank2(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(self.mismatch("add_row", format!("{m}x{n} + {r}x{n2}")));
        }
        Ok(self.push_op(Op::AddRow, vec![a, row], vec![m, n]))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(Op::Scale(k), vec![a], shape)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(self.mismatch("concat", "no operands".into()));
        }
        let (rows, _) = self.rank2(parts[0], "concat")?;
        let mut offsets = vec![0usize];
        for &p in parts {
            let (r, c) = self.rank2(p, "concat")?;
            if r != rows {
                return Err(self.mismatch("concat", format!("row counts differ: {rows} vs {r}")));
            }
            offsets.push(offsets.last().unwrap() + c);
        }
        let total = *offsets.last().unwrap();
        Ok(self.push_op(Op::Concat { offsets }, parts.to_vec(), vec![rows, total]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId, GraphError> {
        let (m, n) = self.rank2(a, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(self.mismatch("slice_cols", format!("[{start}, {start}+{width}) of {n} cols")));
        }
        Ok(self.push_op(Op::SliceCols { start, width }, vec![a], vec![m, width]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(Op::Relu, vec![a], shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(Op::Sigmoid, vec![a], shape)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(Op::Clamp { lo, hi }, vec![a], shape)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Mean, vec![a], vec![1])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Sum, vec![a], vec![1])
    }

    /// Mean binary cross entropy between predictions and constant labels.
    /// Predictions are clamped into [1e-12, 1−1e-12] before the logs.
    pub fn bce(&mut self, pred: NodeId, labels: NodeId) -> Result<NodeId, GraphError> {
        if self.nodes[pred.0].shape != self.nodes[labels.0].shape {
            return Err(self.mismatch(
                "bce",
                format!(
                    "{:?} predictions vs {:?} labels",
                    self.nodes[pred.0].shape, self.nodes[labels.0].shape
                ),
            ));
        }
        if self.nodes[labels.0].requires_grad {
            return Err(self.mismatch("bce", "labels must not require gradients".into()));
        }
        Ok(self.push_op(Op::Bce, vec![pred, labels], vec![1]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.rank2(a, "transpose")?;
        Ok(self.push_op(Op::Transpose, vec![a], vec![n, m]))
    }

    /// Broadcast a scalar node to an arbitrary shape.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if self.nodes[a.0].shape.iter().product::<usize>() != 1 {
            return Err(self.mismatch(
                "broadcast",
                format!("source shape {:?} is not scalar", self.nodes[a.0].shape),
            ));
        }
        Ok(self.push_op(Op::Broadcast { shape: shape.to_vec() }, vec![a], shape.to_vec()))
    }

    /// Weighted row gather from a V×d table. Out-of-range indices error.
    pub fn gather(&mut self, table: NodeId, plan: Rc<GatherPlan>) -> Result<NodeId, GraphError> {
        let (v, d) = self.rank2(table, "gather")?;
        if let Some(mx) = plan.max_index() {
            if mx as usize >= v {
                return Err(GraphError::GatherOutOfRange { index: mx, vocab: v });
            }
        }
        let rows = plan.rows();
        Ok(self.push_op(Op::Gather { plan }, vec![table], vec![rows, d]))
    }

    /// Adjoint of [`Graph::gather`]: accumulate weighted rows into a V×d table.
    pub fn scatter(&mut self, src: NodeId, plan: Rc<GatherPlan>, vocab: usize) -> Result<NodeId, GraphError> {
        let (rows, d) = self.rank2(src, "scatter")?;
        if rows != plan.rows() {
            return Err(self.mismatch("scatter", format!("{rows} rows vs plan of {}", plan.rows())));
        }
        if let Some(mx) = plan.max_index() {
            if mx as usize >= vocab {
                return Err(GraphError::GatherOutOfRange { index: mx, vocab });
            }
        }
        Ok(self.push_op(Op::Scatter { plan, vocab }, vec![src], vec![vocab, d]))
    }

    /// One gradient-descent step as a graph node: `v − eta·grad`. Later
    /// gradients flow through both operands.
    pub fn sgd_step(&mut self, v: NodeId, grad: NodeId, eta: f64) -> Result<NodeId, GraphError> {
        let scaled = self.scale(grad, eta);
        self.sub(v, scaled)
    }

    fn compute(&self, op: &Op, parents: &[NodeId]) -> Tensor {
        let p = |i: usize| self.nodes[parents[i].0].value.as_ref().unwrap();
        match op {
            Op::Input => unreachable!("inputs are not computed"),
            Op::Matmul => tensor::matmul(p(0), p(1)),
            Op::Add => tensor::map2(p(0), p(1), |a, b| a + b),
            Op::Sub => tensor::map2(p(0), p(1), |a, b| a - b),
            Op::Mul => tensor::map2(p(0), p(1), |a, b| a * b),
            Op::Div => tensor::map2(p(0), p(1), |a, b| a / b),
            Op::AddRow => {
                let a = p(0);
                let row = p(1);
                let mut out = a.clone();
                let n = a.cols();
                for r in 0..a.rows() {
                    let orow = &mut out.data_mut()[r * n..(r + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(row.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(k) => tensor::map(p(0), |x| x * k),
            Op::Concat { offsets } => {
                let rows = p(0).rows();
                let total = *offsets.last().unwrap();
                let mut out = vec![0.0; rows * total];
                for (i, _) in parents.iter().enumerate() {
                    let part = p(i);
                    let w = part.cols();
                    for r in 0..rows {
                        let dst = &mut out[r * total + offsets[i]..r * total + offsets[i] + w];
                        dst.copy_from_slice(part.row_slice(r));
                    }
                }
                Tensor::matrix(rows, total, out)
            }
            Op::SliceCols { start, width } => {
                let a = p(0);
                let (m, n) = (a.rows(), a.cols());
                let mut out = vec![0.0; m * width];
                for r in 0..m {
                    out[r * width..(r + 1) * width]
                        .copy_from_slice(&a.data()[r * n + start..r * n + start + width]);
                }
                Tensor::matrix(m, *width, out)
            }
            Op::Relu => tensor::map(p(0), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid => tensor::map(p(0), |x| 1.0 / (1.0 + (-x).exp())),
            Op::Clamp { lo, hi } => tensor::map(p(0), |x| x.clamp(*lo, *hi)),
            Op::Mean => {
                let a = p(0);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Sum => Tensor::scalar(p(0).data().iter().sum::<f64>()),
            Op::Bce => {
                let (pred, y) = (p(0), p(1));
                let n = pred.len() as f64;
                let mut acc = 0.0;
                for (&q, &label) in pred.data().iter().zip(y.data()) {
                    let q = q.clamp(BCE_LO, BCE_HI);
                    acc += label * q.ln() + (1.0 - label) * (1.0 - q).ln();
                }
                Tensor::scalar(-acc / n)
            }
            Op::Transpose => tensor::transpose(p(0)),
            Op::Broadcast { shape } => Tensor::filled(shape, p(0).data()[0]),
            Op::Gather { plan } => {
                let table = p(0);
                let d = table.cols();
                let mut out = vec![0.0; plan.rows() * d];
                for (r, group) in plan.groups.iter().enumerate() {
                    let orow = &mut out[r * d..(r + 1) * d];
                    for &(idx, w) in group {
                        for (o, &t) in orow.iter_mut().zip(table.row_slice(idx as usize)) {
                            *o += w * t;
                        }
                    }
                }
                Tensor::matrix(plan.rows(), d, out)
            }
            Op::Scatter { plan, vocab } => {
                let src = p(0);
                let d = src.cols();
                let mut out = vec![0.0; vocab * d];
                for (r, group) in plan.groups.iter().enumerate() {
                    let srow = src.row_slice(r);
                    for &(idx, w) in group {
                        let orow = &mut out[idx as usize * d..(idx as usize + 1) * d];
                        for (o, &s) in orow.iter_mut().zip(srow) {
                            *o += w * s;
                        }
                    }
                }
                Tensor::matrix(*vocab, d, out)
            }
        }
    }

    fn reachable_from(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(&self.nodes[n.0].parents);
        }
        seen
    }

    /// Evaluate the graph up to `root`, binding placeholder inputs from
    /// `feeds`. Returns the root value. Deterministic for fixed feeds.
    pub fn forward(&mut self, root: NodeId, feeds: &[(NodeId, Tensor)]) -> Result<Tensor, GraphError> {
        for (id, t) in feeds {
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Input) {
                return Err(GraphError::NotAnInput { node: id.0 });
            }
            if node.value.is_some() {
                return Err(GraphError::AlreadyBound {
                    node: id.0,
                    name: name_suffix(&node.name),
                });
            }
            if node.shape != t.shape() {
                return Err(GraphError::ShapeMismatch {
                    node: id.0,
                    op: "input",
                    name: name_suffix(&node.name),
                    detail: format!("fed {:?}, declared {:?}", t.shape(), node.shape),
                });
            }
            self.nodes[id.0].value = Some(t.clone());
        }
        let reach = self.reachable_from(root);
        for (i, reachable) in reach.iter().enumerate().take(root.0 + 1) {
            if !reachable || self.nodes[i].value.is_some() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Input) {
                return Err(GraphError::MissingFeed {
                    node: i,
                    name: name_suffix(&self.nodes[i].name),
                });
            }
            let op = self.nodes[i].op.clone();
            let parents = self.nodes[i].parents.clone();
            let v = self.compute(&op, &parents);
            self.nodes[i].value = Some(v);
        }
        Ok(self.nodes[root.0].value.as_ref().unwrap().clone())
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients for every
    /// `requires_grad` node reachable from the loss; unreachable parameters
    /// get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap, GraphError> {
        self.backward_impl(loss, None)
    }

    /// Like [`Graph::backward`] but only materializes gradients needed to
    /// reach the given target nodes.
    pub fn backward_to(&mut self, loss: NodeId, targets: &[NodeId]) -> Result<GradientMap, GraphError> {
        self.backward_impl(loss, Some(targets))
    }

    fn backward_impl(&mut self, loss: NodeId, targets: Option<&[NodeId]>) -> Result<GradientMap, GraphError> {
        let loss_val = self.nodes[loss.0]
            .value
            .as_ref()
            .ok_or(GraphError::NotEvaluated { node: loss.0 })?;
        if loss_val.len() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: loss_val.shape().to_vec(),
            });
        }

        // Active nodes: require grad, feed the loss, and (when targets are
        // given) lie on a path from some target up to the loss.
        let reach = self.reachable_from(loss);
        let mut towards_target = vec![targets.is_none(); self.nodes.len()];
        if let Some(ts) = targets {
            for t in ts {
                towards_target[t.0] = true;
            }
            for i in 0..=loss.0 {
                if !towards_target[i] {
                    towards_target[i] = self.nodes[i].parents.iter().any(|p| towards_target[p.0]);
                }
            }
        }
        let active = |this: &Self, id: usize| {
            id < this.nodes.len()
                && id <= loss.0
                && reach[id]
                && this.nodes[id].requires_grad
                && towards_target[id]
        };

        let mut contributions: HashMap<usize, Vec<NodeId>> = HashMap::new();
        let seed = self.constant(Tensor::filled(self.nodes[loss.0].shape.clone().as_slice(), 1.0));
        contributions.insert(loss.0, vec![seed]);

        let mut grads: HashMap<NodeId, NodeId> = HashMap::new();
        for id in (0..=loss.0).rev() {
            if !active(self, id) {
                continue;
            }
            let Some(parts) = contributions.remove(&id) else {
                continue;
            };
            let mut g = parts[0];
            for &extra in &parts[1..] {
                g = self.add(g, extra)?;
            }
            grads.insert(NodeId(id), g);

            let op = self.nodes[id].op.clone();
            let parents = self.nodes[id].parents.clone();
            let this = NodeId(id);
            for (slot, &parent) in parents.iter().enumerate() {
                if !active(self, parent.0) {
                    continue;
                }
                let contrib = self.vjp(&op, &parents, this, g, slot)?;
                contributions.entry(parent.0).or_default().push(contrib);
            }
        }

        // Unreached parameters get explicit zeros.
        let fill: Vec<usize> = match targets {
            Some(ts) => ts.iter().map(|t| t.0).collect(),
            None => (0..self.nodes.len())
                .filter(|&i| {
                    matches!(self.nodes[i].op, Op::Input) && self.nodes[i].requires_grad
                })
                .collect(),
        };
        for i in fill {
            grads
                .entry(NodeId(i))
                .or_insert_with(|| self.constant(Tensor::zeros(&self.nodes[i].shape.clone())));
        }

        Ok(GradientMap { grads })
    }

    /// Gradient of `node`'s output w.r.t. its parent at `slot`, given the
    /// upstream gradient `up`. Emits ordinary nodes, so the result is itself
    /// differentiable.
    fn vjp(&mut self, op: &Op, parents: &[NodeId], node: NodeId, up: NodeId, slot: usize) -> Result<NodeId, GraphError> {
        Ok(match op {
            Op::Input => unreachable!("inputs have no parents"),
            Op::Matmul => {
                if slot == 0 {
                    let bt = self.transpose(parents[1])?;
                    self.matmul(up, bt)?
                } else {
                    let at = self.transpose(parents[0])?;
                    self.matmul(at, up)?
                }
            }
            Op::Add => up,
            Op::AddRow => {
                if slot == 0 {
                    up
                } else {
                    let m = self.nodes[parents[0].0].shape[0];
                    let ones = self.constant(Tensor::filled(&[1, m], 1.0));
                    self.matmul(ones, up)?
                }
            }
            Op::Sub => {
                if slot == 0 {
                    up
                } else {
                    self.scale(up, -1.0)
                }
            }
            Op::Mul => {
                let other = parents[1 - slot];
                self.mul(up, other)?
            }
            Op::Div => {
                if slot == 0 {
                    self.div(up, parents[1])?
                } else {
                    // d(a/b)/db = −(a/b)/b
                    let q = self.div(node, parents[1])?;
                    let m = self.mul(up, q)?;
                    self.scale(m, -1.0)
                }
            }
            Op::Scale(k) => self.scale(up, *k),
            Op::Concat { offsets } => self.slice_cols(up, offsets[slot], offsets[slot + 1] - offsets[slot])?,
            Op::SliceCols { start, width } => {
                let (m, n) = (self.nodes[parents[0].0].shape[0], self.nodes[parents[0].0].shape[1]);
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    parts.push(self.constant(Tensor::zeros(&[m, *start])));
                }
                parts.push(up);
                if start + width < n {
                    parts.push(self.constant(Tensor::zeros(&[m, n - start - width])));
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    self.concat_cols(&parts)?
                }
            }
            Op::Relu => {
                let x = self.nodes[parents[0].0].value.as_ref().unwrap();
                let mask = self.constant(tensor::map(x, |v| if v > 0.0 { 1.0 } else { 0.0 }));
                self.mul(up, mask)?
            }
            Op::Sigmoid => {
                // σ' = σ(1−σ), written on the forward output node.
                let shape = self.nodes[node.0].shape.clone();
                let ones = self.constant(Tensor::filled(&shape, 1.0));
                let om = self.sub(ones, node)?;
                let s = self.mul(node, om)?;
                self.mul(up, s)?
            }
            Op::Clamp { lo, hi } => {
                let x = self.nodes[parents[0].0].value.as_ref().unwrap();
                let (lo, hi) = (*lo, *hi);
                let mask = self.constant(tensor::map(x, |v| if v >= lo && v <= hi { 1.0 } else { 0.0 }));
                self.mul(up, mask)?
            }
            Op::Mean => {
                let shape = self.nodes[parents[0].0].shape.clone();
                let n: usize = shape.iter().product();
                let s = self.scale(up, 1.0 / n as f64);
                self.broadcast(s, &shape)?
            }
            Op::Sum => {
                let shape = self.nodes[parents[0].0].shape.clone();
                self.broadcast(up, &shape)?
            }
            Op::Bce => {
                // d/dp of −mean(y ln p̃ + (1−y) ln(1−p̃)), via the clamped
                // predictions so the emitted nodes stay finite.
                debug_assert_eq!(slot, 0, "labels are constant");
                let (pred, labels) = (parents[0], parents[1]);
                let shape = self.nodes[pred.0].shape.clone();
                let n: usize = shape.iter().product();
                let pc = self.clamp(pred, BCE_LO, BCE_HI);
                let ones = self.constant(Tensor::filled(&shape, 1.0));
                let om_y = self.sub(ones, labels)?;
                let om_p = self.sub(ones, pc)?;
                let t1 = self.div(labels, pc)?;
                let t2 = self.div(om_y, om_p)?;
                let diff = self.sub(t1, t2)?;
                let coeff = self.scale(diff, -1.0 / n as f64);
                let up_b = self.broadcast(up, &shape)?;
                self.mul(up_b, coeff)?
            }
            Op::Transpose => self.transpose(up)?,
            Op::Broadcast { .. } => self.sum(up),
            Op::Gather { plan } => {
                let vocab = self.nodes[parents[0].0].shape[0];
                self.scatter(up, plan.clone(), vocab)?
            }
            Op::Scatter { plan, .. } => self.gather(up, plan.clone())?,
        })
    }
}

const BCE_LO: f64 = 1e-12;
const BCE_HI: f64 = 1.0 - 1e-12;
