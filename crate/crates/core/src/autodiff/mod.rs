//! A small reverse-mode automatic differentiation engine over a fixed op set
//! (convolution, 2×2 max pooling, dense, ReLU, add, dropout, softmax
//! cross-entropy), with a switchable backward rule at ReLU nodes.

mod exec;
mod graph;
pub(crate) mod kernels;
mod loss;

pub use exec::{
    backward, backward_from, forward, forward_to, one_hot_seed, Activations, BackwardOptions, Bindings, Gradients,
    Mode, ReluRule,
};
pub use graph::{Graph, GraphBuilder, Node, NodeId, OpKind, Padding};
pub use loss::softmax_xent;
