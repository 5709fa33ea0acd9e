//! Cross-view drone-to-satellite geo-localization at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, a weight-shared
//! two-view encoder with permuted-axis attention, the three-term training
//! objective, a geography- and feature-aware batch sampler and the retrieval
//! metric suite.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DimOrder, Graph, Real, Tensor, Var};
