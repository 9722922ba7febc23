//! Interpolated convolution (InterpConv) on irregular 3D point clouds.
//!
//! Point features are interpolated onto a fixed cubic lattice of kernel
//! weight vectors around every output point, normalized per lattice site,
//! and dotted with the weights. The crate bundles the operator with a small
//! reverse-mode differentiator, the classification and segmentation
//! networks built from it, training and evaluation loops, dataset loaders,
//! and an executable suite of invariant checks.

// `as Float` is a no-op only in the default f64 build.
#![allow(clippy::unnecessary_cast)]
// `!(x > 0.0)` is meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod geometry;
pub mod interpconv;
pub mod kernel;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
