//! Multi-modal cross-domain recommendation with guided user matching.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hypergraph;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod propagation;
pub mod similarity;
pub mod training;

pub use error::{Error, Result};
