pub mod cli;
pub mod decomp;
pub mod error;
pub mod induced;
pub mod mdp;
pub mod metrics;
pub mod planner;
pub mod policy;
pub mod qlearn;

pub use error::{Error, Result};
