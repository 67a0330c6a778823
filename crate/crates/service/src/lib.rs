//! Explanation serving over newline-delimited JSON, built on the shared
//! request pipeline, plus the pieces the `xaas` command line uses.

pub mod error;
pub mod protocol;
pub mod registry;
pub mod server;
pub mod service;

pub use error::{Result, ServiceError};
pub use protocol::{WireError, WireRequest, WireResponse};
pub use server::Server;
pub use service::{Service, ServiceConfig};
