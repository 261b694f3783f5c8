//! Node classification over sparse graphs with Gaussian messages.
//!
//! Each node carries a message modeled as a diagonal Gaussian. Means are
//! propagated with the symmetric-normalized kernel of a graph convolution;
//! variances are propagated by conditioning each node on its neighbors
//! (a Schur-complement reduction with a degree-based correlation). Training
//! minimizes an erf-based likelihood that penalizes uncertain predictions,
//! with hand-written reverse-mode gradients checked against finite
//! differences.
//!
//! Modules:
//! - [`graph`]: sparse adjacency, self-loop degrees, propagation kernel
//! - [`dataset`]: citation-format loading, stratified and OOD splits
//! - [`model`]: two-channel forward passes, prediction, uncertainty scores
//! - [`loss`]: diagonal erf likelihood, gradients, Monte Carlo orthant oracle
//! - [`train`]: Adam, early stopping, manual backward pass, GCN baseline
//! - [`eval`]: accuracy, ECE/ACE, dispersion, topology-uncertainty analysis
//! - [`checkpoint`]: versioned JSON parameter serialization

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod train;

pub use error::{Error, Result};
