pub mod checkpoint;
pub mod config;
pub mod container;
pub mod convergence;
pub mod data;
pub mod error;
pub mod export;
pub mod integration;
pub mod model;
pub mod numerics;
pub mod prunable;
pub mod retrieval;
pub mod study;
pub mod trainer;

pub use error::{Error, Result};
