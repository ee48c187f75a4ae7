pub mod config;
pub mod dynamics;
pub mod enkf;
pub mod envda;
pub mod error;
pub mod harness;
pub mod neural;
pub mod ppo;
pub mod rng;

pub use error::{ConfigError, Error, Result};
