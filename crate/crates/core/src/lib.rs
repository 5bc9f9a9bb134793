//! Capability-vector extraction, merging and orthogonally regularized
//! finetuning, with a small synthetic harness to exercise them.

pub mod autodiff;
pub mod capvec;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod lora;
pub mod models;
pub mod orth;
pub mod synth;
pub mod tensor;
pub mod trainers;

pub use checkpoint::{load_checkpoint, save_checkpoint, ParamSet};
pub use error::{Error, Result};
pub use tensor::Tensor;
