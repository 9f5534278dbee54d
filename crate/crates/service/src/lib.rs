//! CLI stages and HTTP service around `flim_core`.

pub mod cli;
pub mod error;
pub mod pipeline;
pub mod project;
pub mod server;

pub use error::{Result, ServiceError};
pub use project::{ProjectState, Splits};
