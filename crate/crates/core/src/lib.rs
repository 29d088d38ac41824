//! Two-stage vector-quantized factor model: cross-sectional structure
//! discovery through a learned codebook, then code-conditioned
//! mixture-of-experts factor loadings, with the ranking, backtesting and
//! interpretability tooling used to evaluate it.

pub mod analysis;
pub mod backtest;
pub mod datapanel;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod spatial;
pub mod stats;
pub mod temporal;
pub mod training;

pub use diffcore::{Graph, ParamStore, Real, Tensor, Var};
pub use error::{Error, Result};
