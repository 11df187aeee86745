//! Subspace-attention segmentation decoder built from coding-rate objectives.
//!
//! The crate is organized bottom-up:
//!
//! - [`matcore`]: dense matrices, Cholesky/Jacobi/QR, seeded generators.
//! - [`coding_rate`]: rate-distortion functionals and the projected-rate gradient.
//! - [`subspace`]: PCA, k-means, PCA segmentation and low-rank quality analysis.
//! - [`operators`]: the subspace self/cross-attention operators and their step forms.
//! - [`decoder`]: the SA and CA decoders, masks, probes, perturbations, checkpoints.
//! - [`autograd`]: a small reverse-mode tape and the training loop.
//! - [`datagen`]: synthetic union-of-subspaces images and file formats.
//! - [`verify`]: executable property checks with machine-readable reports.
//! - [`cli`]: the `depict` command-line front end.

pub mod autograd;
pub mod cli;
pub mod coding_rate;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod matcore;
pub mod operators;
pub mod subspace;
pub mod verify;

pub use error::{Error, Result};
pub use matcore::{Matrix, Seed};
