//! Dense multiscale feature-fusion pyramid detector.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: a small dense tensor type and a tape-based
//!   reverse-mode differentiator covering the operators the detector needs.
//! * [`backbone`]: a residual feature extractor emitting maps at strides
//!   4, 8, 16 and 32.
//! * [`fusion`]: the top-down feature pyramid plus the dense multiscale
//!   connections into the two finest levels.
//! * [`geometry`]: boxes, anchors, box coding and non-maximum suppression.
//! * [`heads`]: region proposals, the cascade detection head, target
//!   sampling and the multi-task loss.
//! * [`eval`]: AP/AR detection metrics with a 500-detection cap.
//! * [`io`], [`data`], [`train`]: file formats, synthetic scenes,
//!   augmentation, and the momentum-SGD training loop.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub mod backbone;
pub mod data;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod model;
pub mod nn;
pub mod train;
