//! Reverse-mode differentiation and the neural building blocks shared by
//! both model stages.

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod params;
mod rope;
mod tensor;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Random source used by every stochastic model component.
pub type ModelRng = rand_chacha::ChaCha8Rng;

pub use graph::{FrozenLog, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use rope::{rope_frequency, rope_rotate};
pub use tensor::Tensor;
