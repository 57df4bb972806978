//! Application-aware LLM request management.
//!
//! Requests are semantic-function calls whose prompts contain `{{input:..}}`
//! and `{{output:..}}` placeholders bound to semantic variables. The crate
//! links them into per-session DAGs, deduces per-request scheduling
//! preferences from the criteria clients attach to final outputs, detects
//! shared prompt prefixes and places requests onto simulated engines.
//!
//! Everything here is `no_std` + `alloc` and runs in virtual time; network
//! serving, configuration files and the benchmark driver live in the `semvar`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dag;
pub mod engine;
pub mod ids;
pub mod prompt;
pub mod scheduler;
pub mod service;
pub mod time;

pub use ids::{ContextId, EngineId, RequestId, SessionId, VarId};
pub use time::VirtualTime;
