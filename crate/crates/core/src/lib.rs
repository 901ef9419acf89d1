//! Vertical federated learning where parties release their embeddings
//! through the Poisson binomial mechanism and a pairwise-mask secure sum.
//!
//! The server only ever sees the sum of the parties' quantized embeddings,
//! and that sum is a noisy, Rényi-DP release of the aggregate.

pub mod metrics;
pub mod nn;
pub mod pbm;
pub mod privacy;
pub mod secureagg;
pub mod vfl;

#[cfg(feature = "cli")]
pub mod cli;
