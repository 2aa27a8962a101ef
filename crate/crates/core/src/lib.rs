//! Federated calibration engine for item response theory models.
//!
//! Schools compute per-student likelihood gradients on their own response
//! matrices; a center aggregates those gradients and estimates item
//! parameters and school effects by marginal maximum likelihood. An optional
//! differentially private path clips per-student gradients, aggregates them
//! through additive masking, adds central Gaussian noise, and tracks the
//! privacy spend with a Rényi-DP accountant.
//!
//! Module map:
//! - [`irt`]: measurement-model math (2PL and partial credit probabilities,
//!   quadrature, marginal likelihood, per-student gradients, EAP scores).
//! - [`optim`]: the center's maximizers (BFGS with backtracking, Adam).
//! - [`dp`]: Poisson subsampling, ℓ2 clipping, the Gaussian mechanism, and
//!   the MAP ridge penalty.
//! - [`accountant`]: subsampled-Gaussian RDP curves, composition, and
//!   conversion to an (ε, δ) guarantee.
//! - [`secure_agg`]: fixed-point additive masking so the center sees only
//!   the sum of school gradients.
//! - [`federation`]: school and center node roles, the round protocol, and
//!   the loopback/TCP transports.
//! - [`sim`]: data generation, contamination, baselines, and the metric
//!   harness for the simulation studies.

pub mod accountant;
pub mod dp;
pub mod error;
pub mod federation;
pub mod irt;
pub mod optim;
pub mod rng;
pub mod secure_agg;
pub mod sim;

pub use error::{Error, Result};
