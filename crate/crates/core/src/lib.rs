//! A desk-scale laboratory for compositional continual learning.
//!
//! The crate generates streams of procedurally composed 2D scenes, decomposes
//! rasters into concept graphs, classifies them with an exact graph-edit-
//! distance reasoner over a prototype knowledge base, trains a small neural
//! reasoner on frozen convolutional features, and runs continual-learning
//! episodes (including the classic neural baselines) under a reproducible
//! harness.

pub mod baselines;
pub mod decompose;
pub mod error;
pub mod harness;
pub mod neural;
pub mod rng;
pub mod scenegen;
pub mod symbolic;

pub use error::{Error, Result};
