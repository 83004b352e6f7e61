//! Adaptive and fixed multilevel splitting for small-noise diffusions, with
//! the Freidlin–Wentzell quantities that govern their variance.

pub mod action;
pub mod catalog;
pub mod error;
pub mod fluctuation;
pub mod model;
pub mod rng;
pub mod scale;
pub mod sde;
pub mod splitting;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use rng::RngStream;
pub use sde::{first_hit_state, score, simulate, Simulator, Trajectory};
