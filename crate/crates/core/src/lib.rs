//! Multilingual misinformation classification.
//!
//! The pipeline cleans micro-texts ([`preprocess`]), encodes them with a
//! WordPiece vocabulary ([`tokenizer`]), runs a transformer encoder and a
//! Conv1D + dense classification head ([`model`]) built on a small autodiff
//! core ([`nn`]), trains and evaluates it ([`train`]) and aggregates
//! predicted labels over a corpus by language and month ([`analyze`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the two
//! precisions used in practice: `f32` for training and inference, `f64`
//! for gradient checks.

pub mod analyze;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
