//! Coincident-peak prediction from Monte-Carlo load scenarios.
//!
//! Hourly load forecasts and their historical errors are turned into joint
//! scenarios of next-day load. Marginals are semi-parametric (empirical body,
//! generalized Pareto tails), dependence across hours is a sparse Gaussian
//! model fitted with the graphical lasso, and the scenarios feed estimators of
//! the probability that a day or hour sets a coincident peak.

pub mod calendar;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod glasso;
pub mod ingest;
pub mod normal;
pub mod scengen;
pub mod serial;
pub mod strategies;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
