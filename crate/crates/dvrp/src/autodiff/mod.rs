//! Differentiable numeric substrate: flat parameter vectors, scalar
//! expression graphs with exact reverse-mode gradients, and the central
//! finite-difference oracle used to verify them.

mod expr;
mod param;

pub use expr::{
    finite_difference_gradient, gradient_close, Algebra, GraphBuilder, NodeId, ScalarExpr, Values,
};
pub use param::{ParamBlock, ParamVector};
