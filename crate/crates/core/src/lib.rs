//! Demonstration configuration and evaluation harness for in-context
//! learning on visual question answering.

pub mod dataset;
pub mod embed_index;
pub mod error;
pub mod manipulate;
pub mod metrics;
pub mod oracle;
pub mod prompt;
pub mod rng;
pub mod runner;
pub mod strategies;
pub mod synthetic;

pub use error::{Error, OracleFailure, Result};
