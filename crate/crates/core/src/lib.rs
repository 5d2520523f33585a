//! Contributor retention analytics.
//!
//! Ingests repository activity, resolves contributor identities, computes
//! retention metrics, fits survival models that rank contributors by
//! disengagement risk, measures attrition impact through contribution tags,
//! and drives templated engagement messages.

pub mod error;
pub mod model;

pub use error::{RetainError, Result};
pub mod ingest;
pub mod store;
pub mod metrics;
pub mod survival;
pub mod engagement;
pub mod impact;
pub mod config;
pub mod workflow;
