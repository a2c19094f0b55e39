#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod contour;
pub mod error;
pub mod kernels;
pub mod montecarlo;
pub mod presets;
pub mod quadrature;
pub mod spectrum;
pub mod spiked;
pub mod stieltjes;

pub use error::{Error, Result};
