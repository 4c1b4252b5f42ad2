pub mod config;
pub mod consistency;
pub mod dataset;
pub mod dynmodel;
pub mod envs;
pub mod harness;
pub mod error;
pub mod metrics;
pub mod ssm;
pub mod trainers;

pub use error::{Error, Result};
