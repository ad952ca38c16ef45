//! Simulation of an amino-acid sweat biometric: synthetic cohorts, enzymatic
//! cascade kinetics, signal transduction, digitization, continuous
//! authentication and ROC analysis.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod auth;
pub mod cohort;
pub mod digitize;
pub mod error;
pub mod experiment;
pub mod kinetics;
pub mod metrics;
pub mod params;
pub mod provenance;
pub mod transduce;

pub use error::{Error, Result};
