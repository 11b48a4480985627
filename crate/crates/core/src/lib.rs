//! Dyadic event-study engine for cross-border media attention after disasters.
//!
//! The crate is `no_std` (with `alloc`): it holds the numerical core only.
//! File formats, the synthetic world generator, parallel drivers, the CLI and
//! the HTTP service live in the companion `mediashock` crate.
//!
//! Pipeline overview:
//!
//! 1. [`panel`] stores the sparse `(source, destination, day)` count panel.
//! 2. [`catalog`] holds disaster events and builds their analysis windows.
//! 3. [`estimator`] runs a per-event two-way fixed-effects regression
//!    (dyad and day effects absorbed by alternating projections, see
//!    [`absorb`]) and produces one [`estimator::EventEstimate`] per
//!    reporting country, with two-way clustered standard errors.
//! 4. [`features`], [`heterogeneity`] and [`forest`] decompose the estimates
//!    by disaster type, fatalities and country connectedness.
//! 5. [`bootstrap`] resamples estimates by event or country blocks.
//! 6. [`counterfactual`] turns a trained forest into "equivalent attention"
//!    answers and percentile-normalized views.

#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod absorb;
pub mod analysis;
pub mod bootstrap;
pub mod catalog;
pub mod counterfactual;
pub mod country;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod features;
pub mod forest;
pub mod heterogeneity;
pub mod linalg;
pub mod math;
pub mod panel;
pub mod rng;
pub mod stats;

pub use country::CountryCode;
pub use error::{Error, Result};
pub use panel::Day;
