//! Selective state-space sequence layers whose state-transition matrix is
//! chosen per input from a bank of experts, wrapped in a denoising
//! diffusion pipeline for stochastic dense action anticipation, plus the
//! synthetic-corpus harness used to train and evaluate it.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use config::{EvalConfig, ModelConfig, RouterMode};
pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use params::ParamStore;
pub use rng::StreamRng;
pub use tensor::Tensor;
