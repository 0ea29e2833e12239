//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Graph`] records each forward op together with whatever it needs for
//! its backward rule. [`Graph::backward`] then walks the tape once in
//! reverse, summing gradient contributions at fan-out points.

mod graph;
pub(crate) mod kernels;

pub use graph::{BatchStats, Gradients, Graph, Var, BN_EPS};
