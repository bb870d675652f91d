//! Virtual intraoperative-ultrasound sweep simulation over pre-operative MR
//! volumes, and generation of paired (ultrasound-like image, target label)
//! training series.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod raster;
mod serde_util;
pub mod sweep;
pub mod synthesis;
pub mod volume;

pub use error::{Error, Result};
