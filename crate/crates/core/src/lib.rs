//! Multi-label chest radiograph classification with pooled datasets and
//! location supervision, built from scratch in f64.

pub mod data;
pub mod error;
pub mod eval;
pub mod labelspace;
pub mod lossfns;
pub mod netcore;
pub mod optim;
pub mod seed;
pub mod splits;
pub mod train;

pub use error::{Error, Result};
