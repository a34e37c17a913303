//! HTTP gateway and command-line front end over an annotation store.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod jobs;
pub mod ops;

pub use error::{ApiError, CliError, ErrorCode};
