//! Reverse-mode automatic differentiation and gradient checking.

pub mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_built, Differentiable, GradCheckConfig, GradCheckReport, GroupReport};
pub use tape::{BackwardRule, BatchNormMode, Gradients, Node, Op, Tape, Var};
