// Tests compare against literal values from worked examples.
#![cfg_attr(test, allow(clippy::approx_constant, clippy::needless_range_loop))]

pub mod corpus;
pub mod digest;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod gcn;
pub mod http;
pub mod linalg;
pub mod mock;
pub mod pipeline;
pub mod profiler;
pub mod retrieval;
pub mod retry;
pub mod template;

pub use error::{Error, PortError, Result};
