//! Causally consistent key-value store over an operation-based CRDT
//! change graph.
//!
//! [`engine::Document`] holds the hash-linked changes and their merged
//! state, [`kv::KvStore`] maps keys, leases and members onto it, and
//! [`node::Node`] adds peer sync, watches and durability without doing any
//! I/O itself.

pub mod api;
pub mod change;
pub mod durability;
pub mod engine;
pub mod error;
pub mod kv;
pub mod node;
pub mod sync;
pub mod watch;

pub use change::{ActorId, Change, ChangeHash, LeafOp, LeafValue};
pub use engine::{ApplyOutcome, Document, Heads};
pub use error::{EngineError, Error, Result};
pub use kv::{KeyRange, KeyValue, PutArgs, ReadAt, RevisionMode, ValueSchema};
pub use node::{Node, NodeConfig};
pub use sync::{PeerMessage, Topology};
