//! Multi-view stereo depth estimation with transformer-refined cost volumes.
//!
//! This crate provides the full numeric stack — tensors, reverse-mode
//! differentiation, neural building blocks, camera geometry, plane-sweep
//! matching, and the training/evaluation harness — built on the standard
//! library with no external ML framework. All computation is deterministic
//! and single-threaded given a fixed seed.

pub mod attention;
pub mod blocks;
pub mod encodings;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod ops;
pub mod optimize;
pub mod pipeline;
pub mod scenes;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NodeId, Param, ParamId, ParamStore, Tape};
pub use tensor::{seeded_rng, Dtype, Real, Tensor};
