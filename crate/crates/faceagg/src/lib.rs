//! Set-to-template aggregation of face embeddings.
//!
//! A video or image set is represented by a variable-length collection of
//! fixed-dimension embedding vectors. This crate aggregates such a set into a
//! single template vector using dimension-wise attention (a per-dimension
//! softmax over frames driven by cascaded tanh blocks), trains the aggregator
//! end-to-end with an additive angular margin classification head via
//! hand-written gradients, and evaluates verification and identification
//! metrics against pooling baselines.

pub mod attention;
pub mod error;
pub mod eval;
pub mod grad;
pub mod io;
pub mod pool;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::Error;
pub use types::{FeatureSet, FeatureVector};

pub type Result<T> = std::result::Result<T, Error>;
