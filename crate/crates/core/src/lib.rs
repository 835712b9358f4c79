pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod mamba;
pub mod model;
pub mod numerics;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
