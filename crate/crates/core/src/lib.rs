//! Semi-supervised point segmentation under long-tail class imbalance.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only computation:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` matrices.
//! - [`synthdata`]: long-tail Gaussian point scenes and labelling protocols.
//! - [`model`]: K-NN augmented MLP backbone and a linear classifier head.
//! - [`pseudolabel`]: two-round pseudo-label selection (certain + tail expansion).
//! - [`loss`]: focal losses with gradient-guided per-class focusing factors.
//! - [`trainer`]: pre-training followed by alternating backbone / classifier steps.
//! - [`metrics`]: confusion matrices, IoU, mIoU, OA and head/waist/tail groups.
//!
//! File formats, configuration files and the command line live in the
//! `tailseg` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
mod error;
pub mod loss;
mod math;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod rng;
pub mod synthdata;
mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
