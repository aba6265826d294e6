//! Dense f64 arrays, a reverse-mode tape, Adam, and parameter checkpoints.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use error::AdError;
pub use optim::{adam_step, clip_global_norm, AdamConfig};
pub use params::{GradStore, Param, ParamId, ParamStore};
pub use tape::{log_softmax, Gradients, Tape, Var};
