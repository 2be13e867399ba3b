#![no_std]
//! Core of a streaming video-object-segmentation engine with sparse window
//! routing in the image encoder and sparse retrieval in memory attention.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod ledger;
pub mod mask;
pub mod memory;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod smr;
pub mod swr;

pub use error::{Error, Result};
pub use ledger::{CostLedger, CostModule};
pub use mask::{iou, BinaryMask};
pub use numerics::{RngState, Scalar, Tensor};
