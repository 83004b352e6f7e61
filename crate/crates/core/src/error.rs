use thiserror::Error;

use crate::sde::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step budget of {budget} exceeded before reaching A or the stop level")]
    StepBudget {
        budget: usize,
        partial: Box<Trajectory>,
    },

    #[error("level {level} was never reached (score {score})")]
    LevelNotReached { level: f64, score: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("{tied} of {n} clones tied at kill level {level}; reduce dt")]
    TieFlood { tied: usize, n: usize, level: f64 },

    #[error("non-monotone probability table at index {0}")]
    NonMonotone(usize),

    #[error("singular diffusion metric")]
    SingularMetric,

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("profile is partial: {0} levels failed")]
    PartialProfile(usize),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
