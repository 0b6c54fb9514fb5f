//! Multi-frame restoration of a single sharp, non-negative sky image from many
//! blurred, noisy, pre-aligned exposures.
//!
//! The latent image is produced by an untrained encoder network whose weights
//! are fitted so that the latent, re-blurred by each exposure's point-spread
//! function, reproduces the observations under a variance-scaled Huber loss.
//! No explicit image prior is computed: the structure of the small encoder is
//! the regularizer.
//!
//! Modules, bottom-up:
//!
//! - [`types`]: exposure stacks, PSF sets, latent images and their invariants.
//! - [`conv`]: direct and FFT 2-D convolution, correlation and their adjoints.
//! - [`net`]: encoder/decoder forward pass and hand-derived backward pass.
//! - [`loss`]: the whitened Huber objective and its gradient.
//! - [`optim`]: Adam and the training loop.
//! - [`synth`]: synthetic skies, PSFs and corrupted exposure stacks.
//! - [`analyze`]: coadd baseline, PSNR, source extraction and matching.
//! - [`io`]: MFDS stack files, PGM export and training checkpoints.
//! - [`gradcheck`]: finite-difference verification of the backward pass.
//!
//! Exposures must already be registered to a common pixel grid.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod net;
pub mod optim;
mod real;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use types::{ExposureStack, LatentImage, PsfMode, PsfSet, Reconstruction};
