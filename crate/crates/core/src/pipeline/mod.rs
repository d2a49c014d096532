//! The cascade depth-estimation pipeline: frozen backbone stub, trainable
//! feature extraction with cross-view attention, group-wise cost volumes,
//! stage regularizers, and depth readout/supervision.

pub mod backbone;
pub mod cascade;
pub mod cost;
pub mod depth;

pub use backbone::*;
pub use cascade::*;
pub use cost::*;
pub use depth::*;
