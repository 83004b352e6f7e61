//! Scenario orchestration for the amsfw laboratory: declarative configs,
//! ε sweeps, theory-vs-simulation reports and an independent checker.

pub mod check;
pub mod config;
pub mod experiment;
pub mod report;

pub use check::{check_report, CheckOutcome};
pub use config::Scenario;
pub use experiment::{gather, run_scenario, Evidence};
pub use report::{assemble, Report};
