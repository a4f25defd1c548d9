//! Euclidean and Poincaré-ball classification heads trained on precomputed
//! backbone embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: Poincaré-ball primitives (Möbius addition, geodesic
//!   distance, exponential and logarithmic maps, feature clipping).
//! - [`autodiff`]: a small reverse-mode tape with fused primitives for the
//!   model graph, plus a finite-difference checker.
//! - [`model`]: ERM / HypERM / HypCBC heads, hyperbolic MLR, the loss stack
//!   and the checkpoint container.
//! - [`optim`]: AdamW, cosine annealing and early stopping.
//! - [`data`]: the HEMB dataset container, splits, synthetic generator and
//!   batch iteration.
//! - [`metrics`]: accuracy, one-vs-rest AUC, probes, k-NN entropy and disk
//!   exports.
//! - [`train`]: the training loop, run manifests and sweeps used by the CLI.

pub mod autodiff;
pub mod data;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod train;

mod error;

pub use error::{Error, Result};
