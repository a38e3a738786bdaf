//! HTTP service, configuration and command-line front end for the
//! mitigraph engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod runtime;
pub mod script;
pub mod view;

pub use config::ServiceConfig;
pub use runtime::Runtime;
pub use view::{ApiSessionView, SCHEMA_VERSION};
