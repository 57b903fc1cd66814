//! Coarse-to-fine structure-aware style transfer.
//!
//! A half-resolution coarse network transfers global style with a whitening
//! and coloring transform; a full-resolution fine network fuses the coarse
//! decoder's intermediate features through channel attention.

pub mod archive;
pub mod coarse;
pub mod encoder;
pub mod error;
pub mod fine;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod ssf;
pub mod substrate;
pub mod wct;

pub use error::{Error, Result};
