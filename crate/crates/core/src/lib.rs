//! Fast IR-drop estimation for early power-integrity screening.
//!
//! The crate covers the whole offline pipeline: synthesizing layout feature
//! maps with physics-inspired labels ([`datagen`]), a finite-difference
//! reference solver ([`oracle`]), a from-scratch U-Net ([`unet`]) with its
//! training loop ([`train`]), and the metrics and hotspot/risk analysis used
//! to report predictions ([`analysis`]).

pub mod analysis;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod npy;
pub mod oracle;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use grid::{Grid2D, Tensor3};
