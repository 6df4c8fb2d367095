//! Information-theoretic machine unlearning with auditable certificates.
//!
//! The crate trains small networks under a mutual-information regularizer so
//! that their outputs forget a protected feature or a designated slice of the
//! training data, then certifies the result: every unlearning claim is backed
//! by a bound (Fano, Pinsker, compression-rate, or empirical log-odds) that an
//! independent audit can recompute from dumped outputs alone.
//!
//! Module map:
//!
//! - [`densities`]: grids, kernel density estimates, categorical PMFs, and
//!   the tabular dataset container with its CSV codec.
//! - [`infotheory`]: entropy, KL, grid cross-entropy, the mixture form of
//!   mutual information, and the Fano / Pinsker bounds.
//! - [`certificates`]: audit-facing guarantees derived from a measured
//!   mutual-information budget, including the serializable certificate.
//! - [`smallnet`]: hand-rolled MLP and residual scalar nets with exact
//!   backprop, AdamW, and KDE-path loss gradients.
//! - [`unlearner`]: the training loops, unlearning losses, early stopping,
//!   and trajectory recording.
//! - [`barycenter`]: optimal-transport utilities and the fixed-point
//!   Wasserstein barycenter used to neutralize group information in features.
//! - [`harness`]: end-to-end experiment drivers behind the CLI, with
//!   deterministic artifact output.

pub mod barycenter;
pub mod certificates;
pub mod densities;
pub mod error;
pub mod harness;
pub mod infotheory;
pub mod matrix;
pub mod smallnet;
pub mod unlearner;

pub use error::{Error, Result};
