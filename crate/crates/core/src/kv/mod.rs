//! The etcd-style key-value model mapped onto the document.
//!
//! Counter mode keeps a per-key map of revision entries and a global integer
//! revision that increases by one per mutating request; two nodes can hand out
//! the same revision before they sync. Hash mode stores only the latest value
//! per key and addresses history by frontier hashes.

pub mod json;
pub mod layout;
pub mod view;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::change::{ActorId, Change, ChangeHash, LeafOp, LeafValue, Path};
use crate::engine::{ApplyOutcome, Document, Heads};
use crate::error::{Error, Result};
use view::{LeafSource, Overlay};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevisionMode {
    Counter,
    Hash,
}

impl RevisionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RevisionMode::Counter => "counter",
            RevisionMode::Hash => "hash",
        }
    }
}

impl fmt::Display for RevisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RevisionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "counter" => Ok(RevisionMode::Counter),
            "hash" => Ok(RevisionMode::Hash),
            other => Err(format!("unknown mode {other:?} (expected counter|hash)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSchema {
    Bytes,
    Json,
}

impl FromStr for ValueSchema {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bytes" => Ok(ValueSchema::Bytes),
            "json" => Ok(ValueSchema::Json),
            other => Err(format!("unknown schema {other:?} (expected bytes|json)")),
        }
    }
}

/// One key as returned to clients. Revision fields are only populated in
/// counter mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub create_revision: Option<u64>,
    pub mod_revision: Option<u64>,
    pub version: Option<u64>,
    pub lease: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReadAt {
    Current,
    Revision(u64),
    Frontier(Heads),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRange {
    pub key: Vec<u8>,
    /// Half-open end. `None` selects exactly `key`; `[0]` selects every key
    /// at or after `key`.
    pub range_end: Option<Vec<u8>>,
}

impl KeyRange {
    pub fn exact(key: impl Into<Vec<u8>>) -> Self {
        KeyRange { key: key.into(), range_end: None }
    }

    pub fn prefix(prefix: impl Into<Vec<u8>>) -> Self {
        let key = prefix.into();
        KeyRange { range_end: Some(prefix_end(&key)), key }
    }

    pub fn contains(&self, candidate: &[u8]) -> bool {
        match &self.range_end {
            None => candidate == self.key.as_slice(),
            Some(end) if end.as_slice() == [0] => candidate >= self.key.as_slice(),
            Some(end) => candidate >= self.key.as_slice() && candidate < end.as_slice(),
        }
    }
}

/// Smallest key greater than every key starting with `prefix`.
pub fn prefix_end(prefix: &[u8]) -> Vec<u8> {
    let mut end = prefix.to_vec();
    while let Some(last) = end.pop() {
        if last < 0xff {
            end.push(last + 1);
            return end;
        }
    }
    vec![0]
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RangeResult {
    pub kvs: Vec<KeyValue>,
    pub count: usize,
    pub more: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PutArgs {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub lease: Option<u64>,
    pub prev_kv: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Compare {
    Value { key: Vec<u8>, value: Vec<u8> },
    Version { key: Vec<u8>, version: u64 },
    ModRevision { key: Vec<u8>, revision: u64 },
    CreateRevision { key: Vec<u8>, revision: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxnOp {
    Put(PutArgs),
    Range { range: KeyRange, limit: Option<usize> },
    DeleteRange(KeyRange),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxnOpResult {
    Put { prev_kv: Option<KeyValue> },
    Range(RangeResult),
    DeleteRange { deleted: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaseRecord {
    pub id: u64,
    pub ttl_seconds: u64,
    pub granted_by: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub id: u64,
    pub name: String,
    pub peer_urls: Vec<String>,
    pub client_urls: Vec<String>,
}

fn join(mut base: Path, rel: &[String]) -> Path {
    base.extend_from_slice(rel);
    base
}

fn is_live(v: &Option<LeafValue>) -> bool {
    v.is_some()
}

/// Reads one key from any leaf source.
pub fn read_key(
    src: &dyn LeafSource,
    mode: RevisionMode,
    schema: ValueSchema,
    key: &[u8],
    at: Option<u64>,
) -> Option<KeyValue> {
    let mut kv = match mode {
        RevisionMode::Counter => read_counter(src, schema, key, at)?,
        RevisionMode::Hash => read_hash(src, schema, key)?,
    };
    kv.lease = src
        .get(&layout::lease_path(key))
        .and_then(|v| v.as_int())
        .and_then(|v| u64::try_from(v).ok());
    Some(kv)
}

/// Revision entries of a key, grouped by revision, relative leaf paths.
pub(crate) fn revision_entries(
    src: &dyn LeafSource,
    key: &[u8],
    at: Option<u64>,
) -> BTreeMap<u64, Vec<(Path, Option<LeafValue>)>> {
    let root = layout::revs_root(key);
    let depth = root.len();
    let mut entries: BTreeMap<u64, Vec<(Path, Option<LeafValue>)>> = BTreeMap::new();
    for (path, value) in src.scan_prefix(&root) {
        let Some(rev) = path.get(depth).and_then(|r| r.parse::<u64>().ok()) else { continue };
        if at.is_some_and(|a| rev > a) {
            continue;
        }
        entries.entry(rev).or_default().push((path[depth + 1..].to_vec(), value));
    }
    entries
}

fn read_counter(src: &dyn LeafSource, schema: ValueSchema, key: &[u8], at: Option<u64>) -> Option<KeyValue> {
    let mut bytes: Option<Vec<u8>> = None;
    let mut object: Option<Value> = None;
    let mut create = None;
    let mut modified = None;
    let mut version = 0u64;
    for (rev, entry) in revision_entries(src, key, at) {
        let root = entry.iter().find(|(rel, _)| rel.is_empty()).map(|(_, v)| v);
        if let Some(Some(LeafValue::Null)) = root {
            bytes = None;
            object = None;
            create = None;
            version = 0;
            continue;
        }
        match schema {
            ValueSchema::Bytes => {
                let Some(Some(LeafValue::Str(s))) = root else { continue };
                let Some(decoded) = layout::decode_bytes(s) else { continue };
                bytes = Some(decoded);
            }
            ValueSchema::Json => {
                let mut value = object.take().unwrap_or_else(|| Value::Object(Default::default()));
                json::apply_entries(&mut value, &entry);
                object = Some(value);
            }
        }
        create = create.or(Some(rev));
        modified = Some(rev);
        version += 1;
    }
    let value = match schema {
        ValueSchema::Bytes => bytes?,
        ValueSchema::Json => serde_json::to_vec(&object?).expect("json encoding"),
    };
    Some(KeyValue {
        key: key.to_vec(),
        value,
        create_revision: create,
        mod_revision: modified,
        version: Some(version),
        lease: None,
    })
}

fn read_hash(src: &dyn LeafSource, schema: ValueSchema, key: &[u8]) -> Option<KeyValue> {
    let root = layout::value_path(key);
    let depth = root.len();
    let live: Vec<(Path, Option<LeafValue>)> = src
        .scan_prefix(&root)
        .into_iter()
        .filter(|(_, v)| is_live(v))
        .map(|(p, v)| (p[depth..].to_vec(), v))
        .collect();
    if live.is_empty() {
        return None;
    }
    let value = match schema {
        ValueSchema::Bytes => {
            let s = src.get(&root)?;
            layout::decode_bytes(s.as_str()?)?
        }
        ValueSchema::Json => {
            let mut v = Value::Object(Default::default());
            json::apply_entries(&mut v, &live);
            serde_json::to_vec(&v).expect("json encoding")
        }
    };
    Some(KeyValue {
        key: key.to_vec(),
        value,
        create_revision: None,
        mod_revision: None,
        version: None,
        lease: None,
    })
}

/// Keys with any leaf in the document that fall in `range`, byte-ordered.
pub(crate) fn candidate_keys(src: &dyn LeafSource, range: &KeyRange) -> Vec<Vec<u8>> {
    if range.range_end.is_none() {
        return vec![range.key.clone()];
    }
    let root = layout::kvs_root();
    let keys: BTreeSet<Vec<u8>> = src
        .scan_prefix(&root)
        .into_iter()
        .filter_map(|(p, _)| p.get(1).and_then(|c| layout::decode_key(c)))
        .filter(|k| range.contains(k))
        .collect();
    keys.into_iter().collect()
}

pub fn read_range(
    src: &dyn LeafSource,
    mode: RevisionMode,
    schema: ValueSchema,
    range: &KeyRange,
    at: Option<u64>,
    limit: Option<usize>,
) -> RangeResult {
    let all: Vec<KeyValue> = candidate_keys(src, range)
        .into_iter()
        .filter_map(|k| read_key(src, mode, schema, &k, at))
        .collect();
    let count = all.len();
    let kvs: Vec<KeyValue> = match limit {
        Some(l) if l > 0 => all.into_iter().take(l).collect(),
        _ => all,
    };
    RangeResult { more: kvs.len() < count, count, kvs }
}

pub fn read_leases(src: &dyn LeafSource) -> Vec<LeaseRecord> {
    let mut out: BTreeMap<u64, LeaseRecord> = BTreeMap::new();
    for (p, v) in src.scan_prefix(&[layout::LEASES.to_string()]) {
        let Some(v) = v else { continue };
        let Some(id) = p.get(1).and_then(|s| s.parse::<u64>().ok()) else { continue };
        let rec = out.entry(id).or_insert(LeaseRecord { id, ttl_seconds: 0, granted_by: 0 });
        let int = v.as_int().and_then(|i| u64::try_from(i).ok()).unwrap_or(0);
        match p.get(2).map(String::as_str) {
            Some("ttl") => rec.ttl_seconds = int,
            Some("granted_by") => rec.granted_by = int,
            _ => {}
        }
    }
    let live: BTreeSet<u64> = src
        .scan_prefix(&[layout::LEASES.to_string()])
        .into_iter()
        .filter(|(p, v)| p.len() == 2 && v.is_some())
        .filter_map(|(p, _)| p[1].parse().ok())
        .collect();
    out.into_values().filter(|r| live.contains(&r.id)).collect()
}

pub fn read_members(src: &dyn LeafSource) -> Vec<MemberRecord> {
    let mut out: BTreeMap<u64, MemberRecord> = BTreeMap::new();
    for (p, v) in src.scan_prefix(&[layout::MEMBERS.to_string()]) {
        let Some(v) = v else { continue };
        let Some(id) = p.get(1).and_then(|s| s.parse::<u64>().ok()) else { continue };
        let rec = out.entry(id).or_insert_with(|| MemberRecord {
            id,
            name: String::new(),
            peer_urls: Vec::new(),
            client_urls: Vec::new(),
        });
        let text = v.as_str().map(str::to_string);
        match (p.get(2).map(String::as_str), p.len(), text) {
            (Some("name"), 3, Some(t)) => rec.name = t,
            (Some("peer_urls"), 4, Some(t)) => rec.peer_urls.push(t),
            (Some("client_urls"), 4, Some(t)) => rec.client_urls.push(t),
            _ => {}
        }
    }
    out.into_values().collect()
}

pub fn member_ops(member: &MemberRecord) -> Vec<LeafOp> {
    let root = layout::member_record(member.id);
    let mut ops = vec![
        LeafOp::set(root.clone(), LeafValue::Map),
        LeafOp::set(join(root.clone(), &["name".into()]), LeafValue::Str(member.name.clone())),
    ];
    for (field, urls) in [("peer_urls", &member.peer_urls), ("client_urls", &member.client_urls)] {
        let base = join(root.clone(), &[field.to_string()]);
        ops.push(LeafOp::set(base.clone(), LeafValue::Map));
        for (i, url) in urls.iter().enumerate() {
            ops.push(LeafOp::set(join(base.clone(), &[format!("{i:04}")]), LeafValue::Str(url.clone())));
        }
    }
    ops
}

/// The document plus the key-value mapping and a revision index.
#[derive(Debug)]
pub struct KvStore {
    doc: Document,
    mode: RevisionMode,
    schema: ValueSchema,
    actor: ActorId,
    max_revision: u64,
    applied: Vec<ChangeHash>,
}

impl KvStore {
    pub fn new(mut doc: Document, mode: RevisionMode, schema: ValueSchema, actor: ActorId) -> Self {
        doc.take_applied();
        let max_revision = doc.changes().filter_map(layout::change_revision).max().unwrap_or(0);
        KvStore { doc, mode, schema, actor, max_revision, applied: Vec::new() }
    }

    pub fn doc(&self) -> &Document {
        &self.doc
    }

    pub fn mode(&self) -> RevisionMode {
        self.mode
    }

    pub fn schema(&self) -> ValueSchema {
        self.schema
    }

    pub fn actor(&self) -> ActorId {
        self.actor
    }

    /// Highest revision any applied change was assigned (counter mode).
    pub fn current_revision(&self) -> u64 {
        self.max_revision
    }

    pub fn heads(&self) -> &Heads {
        self.doc.heads()
    }

    fn absorb(&mut self) {
        for h in self.doc.take_applied() {
            if let Some(rev) = self.doc.get(&h).and_then(layout::change_revision) {
                self.max_revision = self.max_revision.max(rev);
            }
            self.applied.push(h);
        }
    }

    pub fn commit(&mut self, ops: Vec<LeafOp>) -> Result<Change> {
        let change = self.doc.commit(self.actor, ops)?;
        self.absorb();
        Ok(change)
    }

    pub fn apply_remote(&mut self, change: Change) -> Result<ApplyOutcome> {
        let outcome = self.doc.apply_remote(change);
        self.absorb();
        Ok(outcome?)
    }

    /// Changes applied (locally or remotely) since the last call.
    pub fn take_applied(&mut self) -> Vec<ChangeHash> {
        std::mem::take(&mut self.applied)
    }

    pub fn read(&self, range: &KeyRange, at: &ReadAt, limit: Option<usize>) -> Result<RangeResult> {
        match at {
            ReadAt::Current => Ok(read_range(self.doc.leaves(), self.mode, self.schema, range, None, limit)),
            ReadAt::Revision(rev) => {
                if self.mode != RevisionMode::Counter {
                    return Err(Error::ModeUnsupported("hash"));
                }
                if *rev > self.max_revision {
                    return Err(Error::FutureRevision { requested: *rev, current: self.max_revision });
                }
                let at = (*rev > 0).then_some(*rev);
                Ok(read_range(self.doc.leaves(), self.mode, self.schema, range, at, limit))
            }
            ReadAt::Frontier(heads) => {
                if self.mode != RevisionMode::Hash {
                    return Err(Error::ModeUnsupported("counter"));
                }
                let leaves = self.doc.state_at(heads)?;
                Ok(read_range(&leaves, self.mode, self.schema, range, None, limit))
            }
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<KeyValue> {
        read_key(self.doc.leaves(), self.mode, self.schema, key, None)
    }

    pub fn leases(&self) -> Vec<LeaseRecord> {
        read_leases(self.doc.leaves())
    }

    pub fn members(&self) -> Vec<MemberRecord> {
        read_members(self.doc.leaves())
    }

    /// Starts a write batch that becomes exactly one change.
    pub fn batch(&self) -> Batch<'_> {
        Batch {
            store: self,
            view: Overlay::new(self.doc.leaves()),
            ops: Vec::new(),
            revision: self.max_revision + 1,
            consumed_revision: false,
        }
    }
}

/// Accumulates the ops of one client request. Reads through the batch see
/// its own earlier writes.
pub struct Batch<'a> {
    store: &'a KvStore,
    view: Overlay<'a>,
    ops: Vec<LeafOp>,
    revision: u64,
    consumed_revision: bool,
}

impl Batch<'_> {
    fn push(&mut self, op: LeafOp) {
        self.view.stage(&op);
        self.ops.push(op);
    }

    pub fn push_ops(&mut self, ops: Vec<LeafOp>) {
        for op in ops {
            self.push(op);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Revision this batch commits at, if it mutates keys (counter mode).
    pub fn revision(&self) -> Option<u64> {
        (self.store.mode == RevisionMode::Counter && self.consumed_revision).then_some(self.revision)
    }

    fn mode(&self) -> RevisionMode {
        self.store.mode
    }

    pub fn get(&self, key: &[u8]) -> Option<KeyValue> {
        read_key(&self.view, self.store.mode, self.store.schema, key, None)
    }

    pub fn range(&self, range: &KeyRange, limit: Option<usize>) -> RangeResult {
        read_range(&self.view, self.store.mode, self.store.schema, range, None, limit)
    }

    pub fn lease_exists(&self, id: u64) -> bool {
        matches!(self.view.get(&layout::lease_record(id)), Some(LeafValue::Map))
    }

    pub fn compare(&self, cmp: &Compare) -> Result<bool> {
        let counter_only = |this: &Self| {
            if this.mode() == RevisionMode::Counter {
                Ok(())
            } else {
                Err(Error::ModeUnsupported("hash"))
            }
        };
        Ok(match cmp {
            Compare::Value { key, value } => self.get(key).is_some_and(|kv| &kv.value == value),
            Compare::Version { key, version } => {
                counter_only(self)?;
                self.get(key).and_then(|kv| kv.version).unwrap_or(0) == *version
            }
            Compare::ModRevision { key, revision } => {
                counter_only(self)?;
                self.get(key).and_then(|kv| kv.mod_revision).unwrap_or(0) == *revision
            }
            Compare::CreateRevision { key, revision } => {
                counter_only(self)?;
                self.get(key).and_then(|kv| kv.create_revision).unwrap_or(0) == *revision
            }
        })
    }

    pub fn put(&mut self, args: &PutArgs) -> Result<Option<KeyValue>> {
        if args.key.is_empty() {
            return Err(Error::Malformed("key must not be empty".into()));
        }
        if let Some(id) = args.lease {
            if !self.lease_exists(id) {
                return Err(Error::UnknownLease(id));
            }
        }
        let new_flat = match self.store.schema {
            ValueSchema::Json => Some(json::flatten(&json::parse_object(&args.value)?)?),
            ValueSchema::Bytes => None,
        };
        let prev = self.get(&args.key);
        let key = args.key.as_slice();
        match (self.mode(), new_flat) {
            (RevisionMode::Counter, None) => {
                self.consumed_revision = true;
                let path = layout::rev_path(key, self.revision);
                self.push(LeafOp::set(path, LeafValue::Str(layout::encode_bytes(&args.value))));
            }
            (RevisionMode::Counter, Some(new_flat)) => {
                self.consumed_revision = true;
                let old_flat = match &prev {
                    Some(kv) => json::flatten(&serde_json::from_slice(&kv.value).expect("stored json"))?,
                    None => json::Flat::new(),
                };
                let base = layout::rev_path(key, self.revision);
                self.push_diff(base, &old_flat, &new_flat);
            }
            (RevisionMode::Hash, None) => {
                let path = layout::value_path(key);
                self.push(LeafOp::set(path, LeafValue::Str(layout::encode_bytes(&args.value))));
            }
            (RevisionMode::Hash, Some(new_flat)) => {
                let base = layout::value_path(key);
                let depth = base.len();
                let old_flat: json::Flat = self
                    .view
                    .scan_prefix(&base)
                    .into_iter()
                    .filter_map(|(p, v)| v.map(|v| (p[depth..].to_vec(), v)))
                    .collect();
                self.push_diff(base, &old_flat, &new_flat);
            }
        }
        let lease_path = layout::lease_path(key);
        let current_lease = self.view.get(&lease_path);
        match args.lease {
            Some(id) if current_lease != Some(LeafValue::Int(id as i64)) => {
                self.push(LeafOp::set(lease_path, LeafValue::Int(id as i64)));
            }
            None if current_lease.is_some() => self.push(LeafOp::del(lease_path)),
            _ => {}
        }
        Ok(prev)
    }

    /// Writes only the differing leaves; an empty diff still records the
    /// write by setting the root marker.
    fn push_diff(&mut self, base: Path, old: &json::Flat, new: &json::Flat) {
        let diff = json::diff(old, new);
        if !diff.iter().any(|(_, v)| v.is_some()) {
            self.push(LeafOp::set(base.clone(), LeafValue::Map));
        }
        for (rel, value) in diff {
            let path = join(base.clone(), &rel);
            self.push(match value {
                Some(v) => LeafOp::set(path, v),
                None => LeafOp::del(path),
            });
        }
    }

    fn delete_key(&mut self, key: &[u8]) {
        match self.mode() {
            RevisionMode::Counter => {
                self.consumed_revision = true;
                self.push(LeafOp::set(layout::rev_path(key, self.revision), LeafValue::Null));
                let lease_path = layout::lease_path(key);
                if self.view.get(&lease_path).is_some() {
                    self.push(LeafOp::del(lease_path));
                }
            }
            RevisionMode::Hash => {
                let doomed: Vec<Path> = self
                    .view
                    .scan_prefix(&layout::key_root(key))
                    .into_iter()
                    .filter(|(_, v)| v.is_some())
                    .map(|(p, _)| p)
                    .collect();
                for p in doomed {
                    self.push(LeafOp::del(p));
                }
            }
        }
    }

    pub fn delete_range(&mut self, range: &KeyRange) -> usize {
        let existing: Vec<Vec<u8>> = self.range(range, None).kvs.into_iter().map(|kv| kv.key).collect();
        for key in &existing {
            self.delete_key(key);
        }
        existing.len()
    }

    pub fn lease_grant(&mut self, id: u64, ttl_seconds: u64, granted_by: u64) -> Result<()> {
        if ttl_seconds == 0 {
            return Err(Error::Malformed("lease ttl must be at least 1 second".into()));
        }
        if self.lease_exists(id) {
            return Err(Error::Malformed(format!("lease {id} already exists")));
        }
        let root = layout::lease_record(id);
        self.push(LeafOp::set(root.clone(), LeafValue::Map));
        self.push(LeafOp::set(join(root.clone(), &["ttl".into()]), LeafValue::Int(ttl_seconds as i64)));
        self.push(LeafOp::set(join(root, &["granted_by".into()]), LeafValue::Int(granted_by as i64)));
        Ok(())
    }

    /// Deletes the lease record and every key attached to it.
    pub fn lease_revoke(&mut self, id: u64) -> Result<Vec<Vec<u8>>> {
        if !self.lease_exists(id) {
            return Err(Error::UnknownLease(id));
        }
        let attached: Vec<Vec<u8>> = self
            .view
            .scan_prefix(&layout::kvs_root())
            .into_iter()
            .filter(|(p, v)| {
                p.len() == 3 && p[2] == layout::LEASE && *v == Some(LeafValue::Int(id as i64))
            })
            .filter_map(|(p, _)| layout::decode_key(&p[1]))
            .filter(|k| self.get(k).is_some())
            .collect();
        for key in &attached {
            self.delete_key(key);
        }
        let record: Vec<Path> = self
            .view
            .scan_prefix(&layout::lease_record(id))
            .into_iter()
            .filter(|(_, v)| v.is_some())
            .map(|(p, _)| p)
            .collect();
        for p in record {
            self.push(LeafOp::del(p));
        }
        Ok(attached)
    }

    /// Final op list; counter-mode key mutations lead with the revision bump.
    pub fn into_ops(self) -> Vec<LeafOp> {
        let mut ops = Vec::with_capacity(self.ops.len() + 1);
        if self.store.mode == RevisionMode::Counter && self.consumed_revision {
            ops.push(LeafOp::set(layout::revision_path(), LeafValue::Int(self.revision as i64)));
        }
        ops.extend(self.ops);
        ops
    }
}
