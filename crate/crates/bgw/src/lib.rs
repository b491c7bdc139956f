//! Branching trees with a nearest-ancestor pair interaction.
//!
//! A Bienaymé–Galton–Watson tree with offspring numbers bounded by `K` is
//! reweighted by `b^N₂₂`, where `N₂₂` counts parent–child pairs that both
//! have at least two offspring and `b = e^β` is the coupling.  This crate
//! provides:
//!
//! * [`model`] — trees on digit-string labels, offspring laws, interaction
//!   energies, and the equivalent spin representation on the maximal tree;
//! * [`oracle`] — exact enumeration of all depth-`n` trees: partition
//!   values, expectations, covariances, total-variation distances, and a
//!   randomized correlation-inequality suite (small `n` ground truth);
//! * [`recursion`] — the two-variable quadratic iteration that computes the
//!   same quantities in `O(n)`, with derivative blocks for frontier and
//!   energy observables and a log-space variant for supercritical growth;
//! * [`mcmc`] — Metropolis samplers over depth-`n` trees (global
//!   resampling and a local grow/shrink chain), with exactly assembled
//!   transition matrices at small depth to certify stationarity;
//! * [`phase`] — the critical coupling line, fixed-point analysis,
//!   empirical criticality search, critical slowing-down scaling, the
//!   doubly-exponential growth constant, and least-squares fits.
//!
//! Everything numerical is plain `f64`; randomness is ChaCha12 with
//! explicit seeds and stream indices so every run is reproducible.

pub mod error;
pub mod mcmc;
pub mod model;
pub mod oracle;
pub mod phase;
pub mod recursion;

pub use error::{Error, Result};
pub use model::{Interaction, InteractionKind, Label, ModelParams, OffspringDist, Tree};
