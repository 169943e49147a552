// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cyclic explicit-duration hidden Markov models (CyHMMs).
//!
//! A CyHMM is an explicit-duration HMM whose `J` latent states are visited in
//! a fixed cyclic order `1 → 2 → … → J → 1`. On entering state `j` a duration
//! `d` is drawn from a per-state distribution; the chain then counts down
//! through substates `(j, d), (j, d-1), …, (j, 0)` before moving on. Every
//! substate of a state shares one emission distribution, which models missing
//! data explicitly.
//!
//! The crate is organized as:
//!
//! - [`dataset`]: time-series collections, CSV I/O, the binary missingness
//!   rule and moving-average detrending.
//! - [`model`]: parameterization, expanded substate topology, emission
//!   log-probabilities.
//! - [`inference`]: log-space forward-backward and Viterbi.
//! - [`training`]: EM fitting, multi-initialization and state-count selection.
//! - [`analysis`]: cycle lengths, feature trajectories, feature variability.
//! - [`clustering`]: likelihood-based initialization and hard-assignment EM.
//! - [`simulation`]: sinusoidal ground-truth generator.
//! - [`baselines`] and [`benchmark`]: classical period detectors and the
//!   comparison harness.

#![forbid(unsafe_code)]

pub mod analysis;
pub mod baselines;
pub mod benchmark;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod model;
pub mod simulation;
pub mod stats;
pub mod training;

pub use dataset::{FeatureKind, IndividualSeries, TimeSeriesDataset};
pub use error::{Error, Result};
pub use model::{CyhmmModel, DurationFamily, EmissionParams};
