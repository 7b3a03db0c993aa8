//! Fairness-aware leak detection for water distribution networks.
//!
//! Pipeline: simulate sensor pressures ([`hydrosim`]), fit leak-free virtual
//! sensors and compute residuals ([`sensors`]), classify with a threshold
//! ensemble ([`detector`]), measure group fairness ([`fairness`]) and retrain
//! thresholds under fairness constraints ([`optimize`]). [`experiment`] wires
//! the steps into the CLI pipelines.

pub mod config;
pub mod csvfmt;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod fixtures;
pub mod hydrosim;
pub mod network;
pub mod optimize;
pub mod sensors;

pub use error::{Error, Result};
