//! Post-training conversion of a dense decoder-only language model into a
//! mixture of nested MLP experts, routed per token by predicted difficulty.
//!
//! The pipeline: [`pretrain`] a tiny dense model, score and [`nested`]-ly
//! reorder its MLP hidden units, [`adapt`] it with derived difficulty
//! [`labels`] and a per-layer [`router`], then inspect the result with
//! [`analysis`]. Everything runs on the small reverse-mode engine in
//! [`autodiff`] and persists through the [`checkpoint`] container.

pub mod adapt;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod model;
pub mod nested;
pub mod optim;
pub mod pretrain;
pub mod router;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
