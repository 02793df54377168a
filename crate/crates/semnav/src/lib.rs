//! Registry, HTTP API and command line around `semnav-core`.

pub mod api;
pub mod cli;
pub mod error;
pub mod overlay;
pub mod registry;
pub mod scenario;
pub mod service;

pub use error::{Result, ServiceError};
pub use service::Service;
