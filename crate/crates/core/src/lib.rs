//! Exploratory policy improvement, semi-q-learning and q-learning for
//! entropy-regularized controlled diffusions, with the evaluation oracles
//! and regret tooling needed to measure their convergence.

pub mod cli;
pub mod error;
pub mod fit;
pub mod improve;
pub mod qlearn;
pub mod regret;
pub mod io;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod value;

pub use error::{Error, Result};
