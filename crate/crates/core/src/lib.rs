//! Continual test-time adaptation driven by a compact, dynamically restyled
//! class-exemplar knowledge base.
// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod fourier;
pub mod image;
pub mod knowledge;
pub mod losses;
pub mod model;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
