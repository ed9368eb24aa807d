//! Symbolic graphs evaluated against named input bindings.

use std::collections::{BTreeMap, HashMap};

use crate::diff::ops::OpKind;
use crate::diff::tape::{Tape, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum GraphNode {
    Input(String),
    Const(Tensor),
    Op { kind: OpKind, inputs: Vec<NodeId> },
}

/// Acyclic op graph. A node can only reference nodes created before it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.nodes.push(GraphNode::Input(name.into()));
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(GraphNode::Const(value));
        NodeId(self.nodes.len() - 1)
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|n| n.0 >= self.nodes.len()) {
            return Err(Error::shape(kind.name(), format!("input node {} does not exist yet", bad.0)));
        }
        self.nodes.push(GraphNode::Op { kind, inputs: inputs.to_vec() });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn mark_output(&mut self, node: NodeId) {
        self.outputs.push(node);
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match n {
            GraphNode::Input(name) => Some(name.as_str()),
            _ => None,
        })
    }

    fn run(&self, inputs: &HashMap<String, Tensor>, tape: &mut Tape) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let var = match node {
                GraphNode::Input(name) => {
                    let value = inputs.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    tape.param(value.clone())
                }
                GraphNode::Const(value) => tape.constant(value.clone()),
                GraphNode::Op { kind, inputs } => {
                    let args: Vec<Var> = inputs.iter().map(|n| vars[n.0]).collect();
                    tape.apply(kind.clone(), &args).map_err(|e| match e {
                        Error::Shape { op, detail } => Error::Shape { op: format!("node {id} ({op})"), detail },
                        Error::NonFinite { op } => Error::NonFinite { op: format!("node {id} ({op})") },
                        other => other,
                    })?
                }
            };
            vars.push(var);
        }
        Ok(vars)
    }
}

/// Values of the graph's marked outputs, in marking order.
pub fn evaluate(graph: &Graph, inputs: &HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = graph.run(inputs, &mut tape)?;
    Ok(graph.outputs.iter().map(|o| tape.value(vars[o.0]).clone()).collect())
}

/// d(loss)/d(input) for every named input. Inputs that do not reach the loss
/// get zero gradients.
pub fn gradients(graph: &Graph, inputs: &HashMap<String, Tensor>, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::new();
    let vars = graph.run(inputs, &mut tape)?;
    let grads = tape.backward(vars[loss.0])?;
    let mut out = BTreeMap::new();
    for (id, node) in graph.nodes.iter().enumerate() {
        if let GraphNode::Input(name) = node {
            let g =
                grads.get(vars[id]).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(vars[id]).shape().to_vec()));
            match out.get_mut(name) {
                None => {
                    out.insert(name.clone(), g);
                }
                Some(acc) => {
                    let acc: &mut Tensor = acc;
                    acc.add_assign(&g);
                }
            }
        }
    }
    Ok(out)
}
