//! Monthly enrollment forecasting for clinical-trial sites.
//!
//! The crate is organised along the pipeline:
//!
//! * [`trialdata`] loads and filters the relational trial data and expands it
//!   into the study-site-month panel that every model is trained on.
//! * [`syncohort`] generates synthetic cohorts with known ground truth.
//! * [`features`] builds leakage-safe historical features, imputes them along
//!   coarsening ladders and fits the preprocessing pipeline.
//! * [`models`] holds the count distributions, the boosted-tree engine, the
//!   zero-inflated and hurdle regressions, the baselines, forecasting and
//!   Monte-Carlo intervals.
//! * [`evalharness`] implements the split protocols, metrics and reports.
//! * [`config`] and [`pipeline`] wire everything behind the `enrollcast` CLI.

pub mod calendar;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod stats;
pub mod syncohort;
pub mod trialdata;

pub use error::{Error, Result};
