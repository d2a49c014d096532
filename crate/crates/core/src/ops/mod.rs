//! Differentiable tensor operations.
//!
//! Each operation validates shapes, computes its forward value through a plain
//! kernel, and registers a hand-written backward closure on the tape. The
//! plain kernels (`*_plain`) are also public so inference paths can run the
//! identical arithmetic without recording anything.

mod activation;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod patch;
mod reduce;
mod sample;
mod volume;

pub use activation::*;
pub use conv::*;
pub use elementwise::*;
pub use linalg::*;
pub use loss::*;
pub use norm::*;
pub use patch::*;
pub use reduce::*;
pub use sample::*;
pub use volume::*;
