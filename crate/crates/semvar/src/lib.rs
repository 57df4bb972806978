//! Std-side companion of `semvar-core`: the wire format, configuration,
//! the HTTP service and the benchmark harness.

pub mod bench;
pub mod config;
pub mod server;
pub mod wire;
