use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so the output keeps the input's spatial size (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Parameter,
    /// Cross-correlation over NHWC input with an `[kh, kw, in, out]` kernel
    /// and `[out]` bias. Inputs: `[x, kernel, bias]`.
    Conv2d {
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    /// 2×2 window, stride 2, over NHWC input. Odd trailing rows/columns are dropped.
    MaxPool2x2,
    /// `y = x · Wᵀ + b` with `W: [out, in]`. Inputs: `[x, weight, bias]`.
    /// Rank-1 `x` is a single example; otherwise the leading dim is the batch
    /// and the remaining dims are flattened.
    Dense,
    Relu,
    Add,
    /// Inverted dropout; identity outside training mode.
    Dropout { rate: f32 },
    /// Mean softmax cross-entropy over rows. Inputs: `[logits, targets]`
    /// where targets are per-row probability vectors (usually one-hot).
    SoftmaxXent,
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::Input | OpKind::Parameter => 0,
            OpKind::MaxPool2x2 | OpKind::Relu | OpKind::Dropout { .. } => 1,
            OpKind::Add | OpKind::SoftmaxXent => 2,
            OpKind::Conv2d { .. } | OpKind::Dense => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
}

/// An immutable feed-forward computation. Nodes are stored in topological
/// order: every node's inputs have smaller ids.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    head: NodeId,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// The class-score node (logits).
    pub fn head(&self) -> NodeId {
        self.head
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Ids of nodes whose activation is needed to evaluate `targets`, ascending.
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<NodeId> {
        let mut needed = vec![false; self.nodes.len()];
        for &t in targets {
            needed[t] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for &p in &self.nodes[id].inputs {
                    needed[p] = true;
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| needed[i]).collect()
    }

    /// Number of nodes that consume each node.
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &p in &node.inputs {
                counts[p] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, kind: OpKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
            inputs,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(name, OpKind::Input, vec![])
    }

    pub fn parameter(&mut self, name: &str) -> NodeId {
        self.push(name, OpKind::Parameter, vec![])
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        kernel_size: [usize; 2],
        padding: Padding,
    ) -> NodeId {
        let kind = OpKind::Conv2d {
            kernel: kernel_size,
            stride: 1,
            padding,
        };
        self.push(name, kind, vec![x, kernel, bias])
    }

    pub fn max_pool2x2(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::MaxPool2x2, vec![x])
    }

    pub fn dense(&mut self, name: &str, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(name, OpKind::Dense, vec![x, weight, bias])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::Relu, vec![x])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, OpKind::Add, vec![a, b])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f32) -> NodeId {
        self.push(name, OpKind::Dropout { rate }, vec![x])
    }

    pub fn softmax_xent(&mut self, name: &str, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(name, OpKind::SoftmaxXent, vec![logits, targets])
    }

    pub fn build(self, head: NodeId) -> Result<Graph> {
        let mut names = HashSet::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::invalid(format!("duplicate node name `{}`", node.name)));
            }
            if node.inputs.len() != node.kind.arity() {
                return Err(Error::invalid(format!(
                    "node `{}` expects {} inputs, got {}",
                    node.name,
                    node.kind.arity(),
                    node.inputs.len()
                )));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&p| p >= id) {
                return Err(Error::invalid(format!(
                    "node `{}` refers to node {bad}, which is not defined before it",
                    node.name
                )));
            }
            match node.kind {
                OpKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    if stride != 1 {
                        return Err(Error::invalid(format!(
                            "node `{}`: only stride 1 is supported",
                            node.name
                        )));
                    }
                    if padding == Padding::Same && (kernel[0] % 2 == 0 || kernel[1] % 2 == 0) {
                        return Err(Error::invalid(format!(
                            "node `{}`: same padding needs odd kernel sizes",
                            node.name
                        )));
                    }
                }
                OpKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return Err(Error::invalid(format!(
                        "node `{}`: dropout rate {rate} outside [0, 1)",
                        node.name
                    )));
                }
                _ => {}
            }
        }
        if head >= self.nodes.len() {
            return Err(Error::invalid(format!("head node {head} does not exist")));
        }
        Ok(Graph {
            nodes: self.nodes,
            head,
        })
    }
}
