//! Freidlin–Wentzell action calculus.

pub mod grid;
pub mod lbfgs;
pub mod loss;
pub mod path;
pub mod qp;
pub mod subsolution;

pub use path::{action_with_gradient, geometric_action, rate_function, segment_action, segment_actions, DiscretePath};
