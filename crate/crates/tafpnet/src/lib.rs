//! Temporal asymmetric feature propagation for video instance segmentation.
//!
//! The crate is a self-contained research stack: a small f64 autodiff engine
//! (`tensor`), a 3D-convolutional video backbone (`backbone`), temporal query
//! propagation (`tqp`), asymmetric pyramid enhancement (`aafp`), the fused
//! segmentation model (`model`), plus synthetic data (`scenes`), training
//! (`train`), and evaluation (`metrics`). Runnable entry points live in the
//! `examples/` directory and the thin `tafp` binary.

pub mod aafp;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod scenes;
pub mod tensor;
pub mod tqp;
pub mod train;

pub use error::{Error, Result};
