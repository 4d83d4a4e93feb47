//! Local HTTP service and batch CLI for the trajectory engine.
//!
//! The service binds loopback by default, loads the model once, and answers
//! every request from immutable shared state. It opens no outbound
//! connections.

pub mod api;
pub mod cli;
pub mod config;

pub use api::{router, AppState};
pub use config::ServiceConfig;
