//! JSON HTTP API over a retention data directory.
//!
//! Open signup creates pending accounts that an administrator approves.
//! Demographic attributes are visible to managers and administrators only:
//! other callers get the same payloads with those fields omitted, and are
//! refused on endpoints that exist to show them.

pub mod access;
pub mod accounts;
mod app;
pub mod error;

pub use app::{router, serve, system_clock, AppState, Clock, ModelSummary};
pub use error::{ErrorBody, ServiceError};
