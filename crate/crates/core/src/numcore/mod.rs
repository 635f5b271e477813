//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! value, its shape and (after [`Graph::backward`]) its accumulated gradient.
//! Only the operations the tagger needs are provided: affine maps,
//! segment-wise 1-d convolution, max pooling, elementwise maxima,
//! activations, inverted dropout, row gathers and a few reshaping helpers.
//! Layers with fused gradients plug in through [`CustomOp`].
//!
//! Max operations break ties toward the first index, both in the forward
//! value and in gradient routing.

mod graph;
mod init;
mod layout;
mod real;
mod tensor;

pub use graph::{Activation, CustomOp, Graph, NodeId};
pub use init::{kaiming_bound, kaiming_uniform};
pub use layout::SeqLayout;
pub use real::{log_sum_exp, Real};
pub use tensor::Tensor;

pub(crate) use real::{axpy, dot, sigmoid};
