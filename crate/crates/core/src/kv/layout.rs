//! Paths inside the document.
//!
//! ```text
//! kvs/<b64 key>/revs/<rev>[/<field>...]   counter mode
//! kvs/<b64 key>/value[/<field>...]        hash mode
//! kvs/<b64 key>/lease
//! leases/<id>/{ttl,granted_by}
//! members/<id>/{name,peer_urls/<i>,client_urls/<i>}
//! cluster/revision                        counter mode
//! ```

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::change::{Change, Path};

pub const KVS: &str = "kvs";
pub const LEASES: &str = "leases";
pub const MEMBERS: &str = "members";
pub const CLUSTER: &str = "cluster";
pub const REVS: &str = "revs";
pub const VALUE: &str = "value";
pub const LEASE: &str = "lease";
pub const REVISION: &str = "revision";

pub fn encode_key(key: &[u8]) -> String {
    STANDARD.encode(key)
}

pub fn decode_key(component: &str) -> Option<Vec<u8>> {
    STANDARD.decode(component).ok()
}

pub fn encode_bytes(value: &[u8]) -> String {
    STANDARD.encode(value)
}

pub fn decode_bytes(value: &str) -> Option<Vec<u8>> {
    STANDARD.decode(value).ok()
}

fn path(parts: &[&str]) -> Path {
    parts.iter().map(|s| s.to_string()).collect()
}

pub fn kvs_root() -> Path {
    path(&[KVS])
}

pub fn key_root(key: &[u8]) -> Path {
    vec![KVS.to_string(), encode_key(key)]
}

pub fn revs_root(key: &[u8]) -> Path {
    let mut p = key_root(key);
    p.push(REVS.to_string());
    p
}

pub fn rev_path(key: &[u8], rev: u64) -> Path {
    let mut p = revs_root(key);
    p.push(rev.to_string());
    p
}

pub fn value_path(key: &[u8]) -> Path {
    let mut p = key_root(key);
    p.push(VALUE.to_string());
    p
}

pub fn lease_path(key: &[u8]) -> Path {
    let mut p = key_root(key);
    p.push(LEASE.to_string());
    p
}

pub fn revision_path() -> Path {
    path(&[CLUSTER, REVISION])
}

pub fn lease_record(id: u64) -> Path {
    vec![LEASES.to_string(), id.to_string()]
}

pub fn member_record(id: u64) -> Path {
    vec![MEMBERS.to_string(), id.to_string()]
}

/// Keys touched by a change, decoded.
pub fn affected_keys(change: &Change) -> std::collections::BTreeSet<Vec<u8>> {
    change
        .ops
        .iter()
        .filter(|op| op.path.len() >= 2 && op.path[0] == KVS)
        .filter_map(|op| decode_key(&op.path[1]))
        .collect()
}

/// Counter revision a change was committed at, if it assigned one.
pub fn change_revision(change: &Change) -> Option<u64> {
    change
        .ops
        .iter()
        .filter(|op| op.path.len() == 2 && op.path[0] == CLUSTER && op.path[1] == REVISION)
        .filter_map(|op| op.value.as_ref().and_then(|v| v.as_int()))
        .filter_map(|v| u64::try_from(v).ok())
        .max()
}
