//! Networked causal-kv: the NDJSON TCP service and a live load generator.

pub mod bench;
pub mod server;
