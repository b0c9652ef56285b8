//! Client wire protocol: one JSON object per line.
//!
//! Requests carry a client-chosen `id` and an `op`; keys and values are
//! base64. Every response echoes the id and carries a header with the
//! node's revision (counter mode) or heads (hash mode).

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer};
use serde_json::{json, Map, Value};

use crate::change::ChangeHash;
use crate::error::{Error, Result};
use crate::kv::layout::{decode_bytes, encode_bytes};
use crate::kv::{Compare, KeyRange, KeyValue, PutArgs, RangeResult, ReadAt, TxnOp, TxnOpResult};
use crate::node::Node;
use crate::sync::PeerMessage;

fn b64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    decode_bytes(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid base64 {s:?}")))
}

fn b64_opt<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<u8>>, D::Error> {
    match Option::<String>::deserialize(d)? {
        None => Ok(None),
        Some(s) => decode_bytes(&s)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid base64 {s:?}"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AtWire {
    Revision(u64),
    Heads(Vec<String>),
}

impl AtWire {
    fn into_read_at(self) -> Result<ReadAt> {
        match self {
            AtWire::Revision(r) => Ok(ReadAt::Revision(r)),
            AtWire::Heads(hs) => Ok(ReadAt::Frontier(parse_hashes(&hs)?)),
        }
    }
}

fn parse_hashes<T: FromIterator<ChangeHash>>(hex: &[String]) -> Result<T> {
    hex.iter()
        .map(|h| h.parse::<ChangeHash>().map_err(|e| Error::Malformed(format!("hash {h:?}: {e}"))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct CompareWire {
    #[serde(deserialize_with = "b64")]
    key: Vec<u8>,
    target: String,
    #[serde(default)]
    result: Option<String>,
    #[serde(default, deserialize_with = "b64_opt")]
    value: Option<Vec<u8>>,
    version: Option<u64>,
    mod_revision: Option<u64>,
    create_revision: Option<u64>,
}

impl CompareWire {
    fn into_compare(self) -> Result<Compare> {
        if self.result.as_deref().is_some_and(|r| r != "equal") {
            return Err(Error::Malformed("only equality compares are supported".into()));
        }
        let missing = |field: &str| Error::Malformed(format!("compare on {field} needs a {field} field"));
        let key = self.key;
        Ok(match self.target.as_str() {
            "value" => Compare::Value { key, value: self.value.ok_or_else(|| missing("value"))? },
            "version" => Compare::Version { key, version: self.version.ok_or_else(|| missing("version"))? },
            "mod_revision" => Compare::ModRevision {
                key,
                revision: self.mod_revision.ok_or_else(|| missing("mod_revision"))?,
            },
            "create_revision" => Compare::CreateRevision {
                key,
                revision: self.create_revision.ok_or_else(|| missing("create_revision"))?,
            },
            other => return Err(Error::Malformed(format!("unknown compare target {other:?}"))),
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Put {
        #[serde(deserialize_with = "b64")]
        key: Vec<u8>,
        #[serde(deserialize_with = "b64")]
        value: Vec<u8>,
        #[serde(default)]
        lease: Option<u64>,
        #[serde(default)]
        prev_kv: bool,
    },
    Range {
        #[serde(deserialize_with = "b64")]
        key: Vec<u8>,
        #[serde(default, deserialize_with = "b64_opt")]
        range_end: Option<Vec<u8>>,
        #[serde(default)]
        at: Option<AtWire>,
        #[serde(default)]
        limit: Option<usize>,
    },
    DeleteRange {
        #[serde(deserialize_with = "b64")]
        key: Vec<u8>,
        #[serde(default, deserialize_with = "b64_opt")]
        range_end: Option<Vec<u8>>,
    },
    Txn {
        #[serde(default)]
        compare: Vec<CompareWire>,
        #[serde(default)]
        success: Vec<Value>,
        #[serde(default)]
        failure: Vec<Value>,
    },
    WatchCreate {
        #[serde(deserialize_with = "b64")]
        key: Vec<u8>,
        #[serde(default, deserialize_with = "b64_opt")]
        range_end: Option<Vec<u8>>,
        #[serde(default)]
        start: Option<AtWire>,
    },
    WatchCancel {
        watch_id: u64,
    },
    LeaseGrant {
        ttl: u64,
        #[serde(default)]
        id: Option<u64>,
    },
    LeaseRevoke {
        id: u64,
    },
    MemberList {},
    Status {},
    ReplicationStatus {
        heads: Vec<String>,
    },
}

fn parse_op(v: &Value) -> Result<Op> {
    Op::deserialize(v).map_err(|e| Error::Malformed(e.to_string()))
}

fn txn_op(v: &Value) -> Result<TxnOp> {
    Ok(match parse_op(v)? {
        Op::Put { key, value, lease, prev_kv } => TxnOp::Put(PutArgs { key, value, lease, prev_kv }),
        Op::Range { key, range_end, at: None, limit } => TxnOp::Range { range: KeyRange { key, range_end }, limit },
        Op::Range { .. } => return Err(Error::Malformed("reads inside a txn are always current".into())),
        Op::DeleteRange { key, range_end } => TxnOp::DeleteRange(KeyRange { key, range_end }),
        Op::Txn { .. } => return Err(Error::Malformed("nested txn is not supported".into())),
        _ => return Err(Error::Malformed("txn branches may only put, range or delete_range".into())),
    })
}

pub fn kv_json(kv: &KeyValue) -> Value {
    let mut m = Map::new();
    m.insert("key".into(), json!(encode_bytes(&kv.key)));
    m.insert("value".into(), json!(encode_bytes(&kv.value)));
    for (name, v) in [
        ("create_revision", kv.create_revision),
        ("mod_revision", kv.mod_revision),
        ("version", kv.version),
        ("lease", kv.lease),
    ] {
        if let Some(v) = v {
            m.insert(name.into(), json!(v));
        }
    }
    Value::Object(m)
}

fn range_json(r: &RangeResult) -> Value {
    json!({"kvs": r.kvs.iter().map(kv_json).collect::<Vec<_>>(), "count": r.count, "more": r.more})
}

/// What the connection layer needs to know besides the response line.
#[derive(Clone, Debug, PartialEq)]
pub struct Handled {
    pub response: Value,
    pub watch_created: Option<u64>,
    pub watch_cancelled: Option<u64>,
}

/// A decoded input line on the shared listen port.
#[derive(Debug)]
pub enum Frame {
    Request(Value),
    Peer(PeerMessage),
    /// Not a JSON object, or a peer message that failed validation.
    Garbage(String),
}

pub fn classify(line: &str) -> Frame {
    let value: Value = match serde_json::from_str(line) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => return Frame::Garbage("frame is not a JSON object".into()),
        Err(e) => return Frame::Garbage(e.to_string()),
    };
    if value.get("type").is_some() && value.get("op").is_none() {
        return match PeerMessage::deserialize(&value) {
            Ok(msg) => Frame::Peer(msg),
            Err(e) => Frame::Garbage(format!("peer message: {e}")),
        };
    }
    Frame::Request(value)
}

/// Executes one client request against the node.
pub fn handle_request(node: &mut Node, request: &Value, now_ms: u64) -> Handled {
    let id = request.get("id").cloned().filter(Value::is_u64).unwrap_or(Value::Null);
    let mut handled = Handled { response: Value::Null, watch_created: None, watch_cancelled: None };
    let result = if id.is_null() {
        Err(Error::Malformed("request needs a numeric id".into()))
    } else {
        parse_op(request).and_then(|op| execute(node, op, now_ms, &mut handled))
    };
    let mut response = Map::new();
    response.insert("id".into(), id);
    response.insert("ok".into(), json!(result.is_ok()));
    response.insert("header".into(), node.header().to_json());
    match result {
        Ok(Value::Object(payload)) => response.extend(payload),
        Ok(_) => {}
        Err(e) => {
            response.insert("error".into(), json!({"code": e.code(), "msg": e.to_string()}));
        }
    }
    handled.response = Value::Object(response);
    handled
}

fn execute(node: &mut Node, op: Op, now_ms: u64, handled: &mut Handled) -> Result<Value> {
    Ok(match op {
        Op::Put { key, value, lease, prev_kv } => {
            let prev = node.put(&PutArgs { key, value, lease, prev_kv })?;
            match prev.filter(|_| prev_kv) {
                Some(kv) => json!({"prev_kv": kv_json(&kv)}),
                None => json!({}),
            }
        }
        Op::Range { key, range_end, at, limit } => {
            let at = match at {
                Some(at) => at.into_read_at()?,
                None => ReadAt::Current,
            };
            range_json(&node.range(&KeyRange { key, range_end }, &at, limit)?)
        }
        Op::DeleteRange { key, range_end } => {
            json!({"deleted": node.delete_range(&KeyRange { key, range_end })?})
        }
        Op::Txn { compare, success, failure } => {
            let compares = compare.into_iter().map(CompareWire::into_compare).collect::<Result<Vec<_>>>()?;
            let success = success.iter().map(txn_op).collect::<Result<Vec<_>>>()?;
            let failure = failure.iter().map(txn_op).collect::<Result<Vec<_>>>()?;
            let outcome = node.txn(&compares, &success, &failure)?;
            let responses: Vec<Value> = outcome
                .results
                .iter()
                .map(|r| match r {
                    TxnOpResult::Put { prev_kv } => {
                        json!({"put": prev_kv.as_ref().map(|kv| json!({"prev_kv": kv_json(kv)})).unwrap_or(json!({}))})
                    }
                    TxnOpResult::Range(r) => json!({"range": range_json(r)}),
                    TxnOpResult::DeleteRange { deleted } => json!({"delete_range": {"deleted": deleted}}),
                })
                .collect();
            json!({"succeeded": outcome.succeeded, "responses": responses})
        }
        Op::WatchCreate { key, range_end, start } => {
            let start = start.map(AtWire::into_read_at).transpose()?;
            let id = node.watch_create(KeyRange { key, range_end }, start)?;
            handled.watch_created = Some(id);
            json!({"watch_id": id})
        }
        Op::WatchCancel { watch_id } => {
            node.watch_cancel(watch_id)?;
            handled.watch_cancelled = Some(watch_id);
            json!({"watch_id": watch_id, "canceled": true})
        }
        Op::LeaseGrant { ttl, id } => {
            let id = node.lease_grant(ttl, id, now_ms)?;
            json!({"id": id, "ttl": ttl})
        }
        Op::LeaseRevoke { id } => {
            let removed = node.lease_revoke(id)?;
            json!({"id": id, "deleted": removed.len()})
        }
        Op::MemberList {} => json!({"members": node.members()}),
        Op::Status {} => json!({
            "cluster_id": node.cluster_id(),
            "mode": node.mode(),
            "schema": node.store().schema(),
            "changes": node.doc().len(),
            "buffered": node.doc().buffered_len(),
            "disk_behind": node.disk_behind(),
            "peers": node.peer_ids(),
        }),
        Op::ReplicationStatus { heads } => {
            let hashes: Vec<ChangeHash> = parse_hashes(&heads)?;
            let status: BTreeMap<String, bool> =
                node.replication_status(&hashes)?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            json!({"peers": status})
        }
    })
}
