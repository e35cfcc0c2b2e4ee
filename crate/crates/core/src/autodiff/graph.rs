use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ops::{self, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
}

/// A define-by-run expression graph. Nodes are appended in topological
/// order, so a node's parents always precede it.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    names: BTreeMap<String, NodeId>,
}

/// Named input tensors for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> &mut Self {
        self.map.insert(name.into(), t);
        self
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.insert(name, t);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

impl FromIterator<(String, Tensor)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Bindings {
            map: iter.into_iter().collect(),
        }
    }
}

/// Node values from one evaluation, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl std::ops::Index<NodeId> for Values {
    type Output = Tensor;

    fn index(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Returns the input node bound to `name`, creating it on first use.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()), vec![]);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Input(name) => Some(name.as_str()),
            _ => None,
        })
    }

    /// Appends a node. Panics if a parent id does not precede it.
    pub fn push(&mut self, op: Op, parents: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        assert!(
            parents.iter().all(|p| p.0 < id),
            "parents must precede node {id}"
        );
        self.nodes.push(Node { op, parents });
        NodeId(id)
    }

    /// Attaches an output name to a node.
    pub fn name(&mut self, id: NodeId, name: &str) -> NodeId {
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose, vec![a])
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log, vec![a])
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt, vec![a])
    }
    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Reciprocal, vec![a])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(s), vec![a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { lo, hi }, vec![a])
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![a])
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a])
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat, parts.to_vec())
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { start, len }, vec![a])
    }
    pub fn row_l2_normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowL2Normalize, vec![a])
    }
    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::FrobeniusSq, vec![a])
    }
    pub fn log_add_exp(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::LogAddExp, vec![a, b])
    }
    pub fn gate(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Gate, vec![a, b])
    }
    pub fn batch_matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        self.push(Op::BatchMatVec, vec![m, v])
    }
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow, vec![a, row])
    }
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        self.push(Op::RepeatRows(n), vec![a])
    }
    pub fn context_stack(&mut self, a: NodeId, context: usize, frames: usize) -> NodeId {
        self.push(Op::ContextStack { context, frames }, vec![a])
    }
    pub fn angular_margin(&mut self, a: NodeId, m: f64) -> NodeId {
        self.push(Op::AngularMargin(m), vec![a])
    }
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Detach, vec![a])
    }

    /// Evaluates every node under `bindings`.
    pub fn eval(&self, bindings: &Bindings) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            ops::check_arity(i, &node.op, node.parents.len())?;
            let v = match &node.op {
                Op::Input(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Unbound(name.clone()))?,
                op => {
                    let xs: Vec<&Tensor> = node.parents.iter().map(|p| &values[p.0]).collect();
                    ops::forward(i, op, &xs)?
                }
            };
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values.push(v);
        }
        Ok(Values { values })
    }

    /// Values of all named nodes.
    pub fn outputs(&self, values: &Values) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(k, id)| (k.clone(), values[*id].clone()))
            .collect()
    }

    pub fn output(&self, values: &Values, name: &str) -> Result<Tensor> {
        self.named(name)
            .map(|id| values[id].clone())
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    /// Reverse sweep from the scalar `loss`. Returns the gradient for every
    /// input node, zero-filled for inputs the loss does not depend on.
    pub fn backprop(&self, values: &Values, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let lv = &values[loss];
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            let xs: Vec<&Tensor> = node.parents.iter().map(|p| &values.values[p.0]).collect();
            let contribs = ops::backward(&node.op, &xs, &values.values[i], &g);
            for (p, c) in node.parents.iter().zip(contribs) {
                let Some(c) = c else { continue };
                match &mut grads[p.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(c.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input(name) = &node.op {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(values.values[i].shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Evaluates `graph` and returns its named outputs.
pub fn eval_graph(graph: &Graph, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
    let values = graph.eval(bindings)?;
    Ok(graph.outputs(&values))
}

/// Evaluates `graph` and returns input gradients of the scalar `loss`.
pub fn backprop(
    graph: &Graph,
    bindings: &Bindings,
    loss: NodeId,
) -> Result<BTreeMap<String, Tensor>> {
    let values = graph.eval(bindings)?;
    graph.backprop(&values, loss)
}
