//! Grid-Gaussian splatting for road surfaces.
//!
//! A road patch in front of the vehicle is discretised into a bird's-eye
//! view lattice. Each lattice cell at the finest level carries one 3D
//! Gaussian whose height comes from an elevation map and whose colour comes
//! from degree-1 spherical harmonics. The crate renders such scenes,
//! differentiates the renderer analytically and fits scenes to posed images.
//!
//! Modules:
//! - [`scene`]: grid geometry, elevation maps, cameras, the Gaussian grid
//! - [`bevquery`]: anchor projection, bilinear sampling, height fusion and
//!   elevation decoding on arbitrary feature tensors
//! - [`splat`]: forward and backward rasterization
//! - [`objective`]: losses and metrics
//! - [`fit`]: Adam, test-time optimisation and full scene fitting
//! - [`synth`]: procedural road scenes and datasets
//! - [`io`]: binary and text file formats
//! - [`cli`]: the `roadsplat` command line

// Negated comparisons are used on purpose so that NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bevquery;
pub mod cli;
pub mod error;
pub mod fit;
pub mod image;
pub mod io;
pub mod objective;
pub mod scene;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
