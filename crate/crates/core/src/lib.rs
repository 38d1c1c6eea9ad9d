//! Compressed knowledge-graph embeddings through dynamic magnitude pruning,
//! mutual teacher/student distillation and a meta-learned teacher update.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod meta;
pub mod model;
pub mod optim;
pub mod prune;
pub mod synth;

pub use error::{Error, Result};
