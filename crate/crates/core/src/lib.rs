//! Conditional blind-spot network (C-BSN) for self-supervised image denoising.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense tensors and a tape-based reverse-mode differentiator
//!   with exactly the operations the network and its losses need.
//! - [`model`]: the conditional blind-spot network, whose blindness is chosen
//!   per call on shared parameters, plus the checkpoint format.
//! - [`resample`]: random subsampler, pixel-shuffle mosaics, space-to-batch.
//! - [`losses`]: self-supervised, invariance, blind and total objectives, and
//!   a Monte-Carlo check of the supervised-loss upper bound.
//! - [`noisegen`]: synthetic clean images, noise processes and normalization.
//! - [`trainkit`]: Adam, learning-rate schedule, batching and the training loop.
//! - [`metrics`]: PSNR, SSIM, checkerboard score and the blind-spot tester.
//! - [`cli`]: the `cbsn` command-line tool, its config and raster formats.
//!
//! Data-parallel loops (per-image convolution work, Monte-Carlo trials,
//! evaluation sweeps) go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Reductions
//! always happen in index order, so both modes produce bitwise-identical
//! results.

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noisegen;
pub mod resample;
pub mod trainkit;

pub use diffcore::{Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{CbsnConfig, CbsnParams};
