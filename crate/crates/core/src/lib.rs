//! Streaming proactive consultation pipeline.

pub mod belief;
pub mod boundary;
pub mod case;
pub mod config;
pub mod extract;
pub mod harness;
pub mod metrics;
pub mod planner;
pub mod retrieval;
pub mod session;
pub mod stream;
pub mod trace;
pub mod util;
