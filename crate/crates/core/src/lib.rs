//! Single-image HDR reconstruction with a feature-masked U-Net.
//!
//! The crate covers the full desk-scale stack: a small tensor engine with
//! reverse-mode differentiation ([`tensor`]), soft exposure masks and the
//! mask-propagating U-Net ([`network`]), LDR/HDR conversions ([`pipeline`]),
//! the reconstruction/perceptual/style objective ([`losses`]), textured patch
//! selection ([`sampler`]), two-stage training and evaluation ([`trainer`]),
//! and bit-exact file formats ([`io`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod sampler;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
