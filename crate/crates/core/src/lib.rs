//! Reconstruction-based pathology detection with hypergraph latent refinement.
//!
//! The crate is organised bottom-up:
//!
//! - [`hypergraph`]: sparse hypergraphs, kNN hyperedges and normalized
//!   hypergraph convolution with exact gradients.
//! - [`pdc`]: the convolutional autoencoder (residual encoder, upsampling
//!   decoder), residual anomaly maps and image-level scores.
//! - [`popusense`]: latent refinement over a per-sample spatial hypergraph
//!   (narrow) or a population hypergraph backed by a memory bank (wide).
//! - [`synthdata`]: deterministic ellipse phantoms, contrast and texture
//!   anomaly injection, and the on-disk PNG dataset format.
//! - [`train`] and [`checkpoint`]: seeded SGD training and the checkpoint archive.
//! - [`evalkit`]: image/pixel metrics and the configuration x anomaly-type report.
//! - [`config`]: the sectioned TOML run configuration used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod hypergraph;
mod nn;
pub mod pdc;
pub mod popusense;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
