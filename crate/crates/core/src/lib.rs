pub mod ablation;
pub mod agent;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod network;
pub mod observation;
pub mod plot;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
