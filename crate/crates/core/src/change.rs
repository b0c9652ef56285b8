//! Changes: the unit of replication.
//!
//! A change is a hash-identified, dependency-linked batch of leaf operations.
//! Its hash is the SHA-256 of its canonical JSON encoding (sorted keys, no
//! whitespace, `hash` field absent), so any implementation that can emit the
//! same bytes can verify it independently.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::EngineError;

/// Identifies one writer. `0` belongs to the genesis change only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActorId(pub u64);

impl ActorId {
    pub const GENESIS: ActorId = ActorId(0);
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// SHA-256 digest identifying a change. Orders bytewise, which matches the
/// lexicographic order of the lowercase hex rendering.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChangeHash(pub [u8; 32]);

impl ChangeHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ChangeHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ChangeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ChangeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChangeHash({})", &self.to_hex()[..12])
    }
}

impl FromStr for ChangeHash {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(EngineError::Malformed(format!("bad change hash {s:?}")));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| EngineError::Malformed(format!("bad change hash {s:?}: {e}")))?;
        Ok(ChangeHash(out))
    }
}

impl Serialize for ChangeHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ChangeHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Value stored at a leaf of the nested map.
///
/// `Map` marks that a path is a (possibly empty) map node; it encodes as `{}`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeafValue {
    Null,
    Bool(bool),
    Int(i64),
    Str(String),
    Map,
}

impl LeafValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            LeafValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            LeafValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Converts a JSON scalar (or empty object) into a leaf value.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, EngineError> {
        use serde_json::Value;
        Ok(match value {
            Value::Null => LeafValue::Null,
            Value::Bool(b) => LeafValue::Bool(*b),
            Value::Number(n) => LeafValue::Int(
                n.as_i64()
                    .ok_or_else(|| EngineError::Malformed(format!("non-integer number {n}")))?,
            ),
            Value::String(s) => LeafValue::Str(s.clone()),
            Value::Object(m) if m.is_empty() => LeafValue::Map,
            other => return Err(EngineError::Malformed(format!("not a leaf value: {other}"))),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            LeafValue::Null => Value::Null,
            LeafValue::Bool(b) => Value::Bool(*b),
            LeafValue::Int(i) => Value::from(*i),
            LeafValue::Str(s) => Value::String(s.clone()),
            LeafValue::Map => Value::Object(Default::default()),
        }
    }
}

impl Serialize for LeafValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        match self {
            LeafValue::Null => serializer.serialize_unit(),
            LeafValue::Bool(b) => serializer.serialize_bool(*b),
            LeafValue::Int(i) => serializer.serialize_i64(*i),
            LeafValue::Str(s) => serializer.serialize_str(s),
            LeafValue::Map => serializer.serialize_map(Some(0))?.end(),
        }
    }
}

impl<'de> Deserialize<'de> for LeafValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(deserializer)?;
        LeafValue::from_json(&v).map_err(D::Error::custom)
    }
}

pub type Path = Vec<String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Set,
    Del,
}

/// One leaf write or delete. Fields are declared in canonical key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafOp {
    pub action: Action,
    pub path: Path,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present_value")]
    pub value: Option<LeafValue>,
}

/// A present `"value": null` is the null scalar, not an absent value.
fn present_value<'de, D: Deserializer<'de>>(d: D) -> Result<Option<LeafValue>, D::Error> {
    LeafValue::deserialize(d).map(Some)
}

impl LeafOp {
    pub fn set<P: Into<Path>>(path: P, value: LeafValue) -> Self {
        LeafOp { action: Action::Set, path: path.into(), value: Some(value) }
    }

    pub fn del<P: Into<Path>>(path: P) -> Self {
        LeafOp { action: Action::Del, path: path.into(), value: None }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.path.is_empty() || self.path.iter().any(|c| c.is_empty()) {
            return Err(EngineError::Malformed(format!("bad path {:?}", self.path)));
        }
        match (self.action, &self.value) {
            (Action::Set, Some(_)) | (Action::Del, None) => Ok(()),
            (Action::Set, None) => Err(EngineError::Malformed("set without value".into())),
            (Action::Del, Some(_)) => Err(EngineError::Malformed("del with value".into())),
        }
    }
}

/// Hash-free canonical view; key order here is the serialized order.
#[derive(Serialize)]
struct CanonicalRef<'a> {
    actor: ActorId,
    deps: &'a BTreeSet<ChangeHash>,
    lamport: u64,
    ops: &'a [LeafOp],
    seq: u64,
}

/// Wire and log form: the canonical object plus `hash`, keys still sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireChange {
    actor: ActorId,
    deps: Vec<ChangeHash>,
    hash: ChangeHash,
    lamport: u64,
    ops: Vec<LeafOp>,
    seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Change {
    pub actor: ActorId,
    pub seq: u64,
    pub lamport: u64,
    pub deps: BTreeSet<ChangeHash>,
    pub ops: Vec<LeafOp>,
    hash: ChangeHash,
}

impl Change {
    /// Builds a change and derives its hash.
    pub fn new(
        actor: ActorId,
        seq: u64,
        lamport: u64,
        deps: BTreeSet<ChangeHash>,
        ops: Vec<LeafOp>,
    ) -> Self {
        let hash = ChangeHash::of_bytes(&canonical_bytes(actor, seq, lamport, &deps, &ops));
        Change { actor, seq, lamport, deps, ops, hash }
    }

    pub fn hash(&self) -> ChangeHash {
        self.hash
    }

    pub fn is_genesis(&self) -> bool {
        self.actor == ActorId::GENESIS && self.deps.is_empty()
    }

    /// Canonical bytes that the hash covers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(self.actor, self.seq, self.lamport, &self.deps, &self.ops)
    }

    pub fn verify_hash(&self) -> bool {
        ChangeHash::of_bytes(&self.canonical_bytes()) == self.hash
    }

    /// Wire form: canonical object with the `hash` key included.
    pub fn to_wire_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("change serialization is infallible")
    }

    fn to_wire(&self) -> WireChange {
        WireChange {
            actor: self.actor,
            deps: self.deps.iter().copied().collect(),
            hash: self.hash,
            lamport: self.lamport,
            ops: self.ops.clone(),
            seq: self.seq,
        }
    }

    /// Parses the wire form and checks that the claimed hash matches.
    pub fn from_wire_json(s: &str) -> Result<Self, EngineError> {
        let wire: WireChange =
            serde_json::from_str(s).map_err(|e| EngineError::Malformed(e.to_string()))?;
        Self::from_wire(wire)
    }

    fn from_wire(wire: WireChange) -> Result<Self, EngineError> {
        let deps: BTreeSet<ChangeHash> = wire.deps.iter().copied().collect();
        if deps.len() != wire.deps.len() || !wire.deps.windows(2).all(|w| w[0] < w[1]) {
            return Err(EngineError::Malformed("deps must be ascending and unique".into()));
        }
        for op in &wire.ops {
            op.validate()?;
        }
        let change = Change::new(wire.actor, wire.seq, wire.lamport, deps, wire.ops);
        if change.hash != wire.hash {
            return Err(EngineError::HashMismatch { claimed: wire.hash, computed: change.hash });
        }
        Ok(change)
    }
}

impl Serialize for Change {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Change {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireChange::deserialize(deserializer)?;
        Change::from_wire(wire).map_err(D::Error::custom)
    }
}

fn canonical_bytes(
    actor: ActorId,
    seq: u64,
    lamport: u64,
    deps: &BTreeSet<ChangeHash>,
    ops: &[LeafOp],
) -> Vec<u8> {
    serde_json::to_vec(&CanonicalRef { actor, deps, lamport, ops, seq })
        .expect("canonical serialization is infallible")
}
