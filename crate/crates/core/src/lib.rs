//! Speaker-embedding back-ends on top of a toy transformer encoder, the
//! fine-tuning strategies used to adapt such an encoder, and the trial
//! metrics used to evaluate the resulting embeddings.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
