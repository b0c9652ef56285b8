//! Watch registrations and event emission.
//!
//! Counter mode may report a revision twice: a merge can replace the value
//! already delivered for a revision, and the watcher is told when the
//! incoming change wins. Hash mode reports every change exactly once.

use std::collections::{BTreeMap, HashSet};

use serde_json::{json, Value};

use crate::change::ChangeHash;
use crate::engine::{apply_op, Heads, Leaves, Stamp};
use crate::error::{Error, Result};
use crate::kv::layout;
use crate::kv::{self, KeyRange, KvStore, ReadAt, RevisionMode};

/// Outbound event queue bound per watch connection.
pub const MAX_PENDING_EVENTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventType {
    Put,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatchEvent {
    pub kind: EventType,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    /// Counter mode.
    pub mod_revision: Option<u64>,
    /// Hash mode: the change this event reports and the frontier after it.
    pub change: Option<ChangeHash>,
    pub heads: Option<Heads>,
}

impl WatchEvent {
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "type": match self.kind { EventType::Put => "put", EventType::Delete => "delete" },
            "key": layout::encode_bytes(&self.key),
        });
        let obj = v.as_object_mut().expect("object");
        if let Some(value) = &self.value {
            obj.insert("value".into(), json!(layout::encode_bytes(value)));
        }
        if let Some(rev) = self.mod_revision {
            obj.insert("mod_revision".into(), json!(rev));
        }
        if let Some(change) = &self.change {
            obj.insert("change".into(), json!(change.to_hex()));
        }
        if let Some(heads) = &self.heads {
            obj.insert("heads".into(), json!(heads.iter().map(|h| h.to_hex()).collect::<Vec<_>>()));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatchPush {
    pub watch_id: u64,
    pub events: Vec<WatchEvent>,
}

impl WatchPush {
    pub fn to_json(&self) -> Value {
        json!({
            "watch_id": self.watch_id,
            "events": self.events.iter().map(WatchEvent::to_json).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug)]
struct Registration {
    range: KeyRange,
    /// Counter mode: last delivered (revision, stamp) per key.
    last_sent: BTreeMap<Vec<u8>, (u64, Stamp)>,
    /// Hash mode: changes already reported.
    seen: HashSet<ChangeHash>,
}

#[derive(Debug, Default)]
pub struct WatchSet {
    next_id: u64,
    regs: BTreeMap<u64, Registration>,
    pending: Vec<WatchPush>,
}

fn stamp_of(store: &KvStore, hash: &ChangeHash) -> Option<Stamp> {
    store.doc().get(hash).map(|c| Stamp { lamport: c.lamport, hash: *hash })
}

/// Highest stamp among the leaves of one revision entry.
fn entry_stamp(leaves: &Leaves, key: &[u8], rev: u64) -> Option<Stamp> {
    let root = layout::rev_path(key, rev);
    leaves
        .range::<[String], _>((std::ops::Bound::Included(root.as_slice()), std::ops::Bound::Unbounded))
        .take_while(|(p, _)| p.starts_with(&root))
        .map(|(_, l)| l.stamp)
        .max()
}

fn counter_event(store: &KvStore, key: &[u8], rev: u64) -> WatchEvent {
    match kv::read_key(store.doc().leaves(), RevisionMode::Counter, store.schema(), key, Some(rev)) {
        Some(kv) => WatchEvent {
            kind: EventType::Put,
            key: key.to_vec(),
            value: Some(kv.value),
            mod_revision: kv.mod_revision,
            change: None,
            heads: None,
        },
        None => WatchEvent {
            kind: EventType::Delete,
            key: key.to_vec(),
            value: None,
            mod_revision: Some(rev),
            change: None,
            heads: None,
        },
    }
}

fn hash_event(leaves: &Leaves, store: &KvStore, key: &[u8], change: ChangeHash, heads: Heads) -> WatchEvent {
    let current = kv::read_key(leaves, RevisionMode::Hash, store.schema(), key, None);
    WatchEvent {
        kind: if current.is_some() { EventType::Put } else { EventType::Delete },
        key: key.to_vec(),
        value: current.map(|kv| kv.value),
        mod_revision: None,
        change: Some(change),
        heads: Some(heads),
    }
}

impl WatchSet {
    pub fn len(&self) -> usize {
        self.regs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.regs.contains_key(&id)
    }

    /// Registers a watch. With a start position, events after it are queued
    /// immediately.
    pub fn create(&mut self, store: &KvStore, range: KeyRange, start: Option<ReadAt>) -> Result<u64> {
        let mut reg = Registration { range, last_sent: BTreeMap::new(), seen: HashSet::new() };
        let replay = match (store.mode(), start) {
            (_, None) | (_, Some(ReadAt::Current)) => Vec::new(),
            (RevisionMode::Counter, Some(ReadAt::Revision(start))) => {
                if start > store.current_revision() {
                    return Err(Error::FutureRevision { requested: start, current: store.current_revision() });
                }
                replay_counter(store, &mut reg, start)
            }
            (RevisionMode::Hash, Some(ReadAt::Frontier(start))) => replay_hash(store, &mut reg, &start)?,
            (RevisionMode::Counter, Some(ReadAt::Frontier(_))) => return Err(Error::ModeUnsupported("counter")),
            (RevisionMode::Hash, Some(ReadAt::Revision(_))) => return Err(Error::ModeUnsupported("hash")),
        };
        self.next_id += 1;
        let id = self.next_id;
        self.regs.insert(id, reg);
        if !replay.is_empty() {
            self.pending.push(WatchPush { watch_id: id, events: replay });
        }
        Ok(id)
    }

    pub fn cancel(&mut self, id: u64) -> bool {
        self.pending.retain(|p| p.watch_id != id);
        self.regs.remove(&id).is_some()
    }

    /// Queues events for changes that were just applied, in application order.
    pub fn on_applied(&mut self, store: &KvStore, hashes: &[ChangeHash]) {
        if self.regs.is_empty() {
            return;
        }
        let mut per_watch: BTreeMap<u64, Vec<WatchEvent>> = BTreeMap::new();
        for hash in hashes {
            let Some(change) = store.doc().get(hash) else { continue };
            let keys = layout::affected_keys(change);
            if keys.is_empty() {
                continue;
            }
            let Some(stamp) = stamp_of(store, hash) else { continue };
            let rev = layout::change_revision(change);
            for (id, reg) in self.regs.iter_mut() {
                let already_seen = reg.seen.contains(hash);
                for key in keys.iter().filter(|k| reg.range.contains(k)) {
                    let event = match (store.mode(), rev) {
                        (RevisionMode::Counter, Some(rev)) => {
                            let emit = match reg.last_sent.get(key) {
                                None => true,
                                Some((last_rev, last_stamp)) => {
                                    rev > *last_rev || (rev == *last_rev && stamp > *last_stamp)
                                }
                            };
                            if !emit {
                                continue;
                            }
                            reg.last_sent.insert(key.clone(), (rev, stamp));
                            counter_event(store, key, rev)
                        }
                        (RevisionMode::Counter, None) => continue,
                        (RevisionMode::Hash, _) => {
                            if already_seen {
                                continue;
                            }
                            reg.seen.insert(*hash);
                            hash_event(store.doc().leaves(), store, key, *hash, store.heads().clone())
                        }
                    };
                    per_watch.entry(*id).or_default().push(event);
                }
            }
        }
        for (watch_id, events) in per_watch {
            self.pending.push(WatchPush { watch_id, events });
        }
    }

    pub fn take_pushes(&mut self) -> Vec<WatchPush> {
        std::mem::take(&mut self.pending)
    }
}

/// Per key, the winning value of every revision entry after `start`,
/// tombstones as deletes, ordered by revision.
fn replay_counter(store: &KvStore, reg: &mut Registration, start: u64) -> Vec<WatchEvent> {
    let leaves = store.doc().leaves();
    let mut events: Vec<(u64, Vec<u8>, WatchEvent)> = Vec::new();
    for key in kv::candidate_keys(leaves, &reg.range) {
        for rev in kv::revision_entries(leaves, &key, None).into_keys().filter(|r| *r > start) {
            let Some(stamp) = entry_stamp(leaves, &key, rev) else { continue };
            reg.last_sent.insert(key.clone(), (rev, stamp));
            events.push((rev, key.clone(), counter_event(store, &key, rev)));
        }
    }
    events.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    events.into_iter().map(|(_, _, e)| e).collect()
}

/// One event per change after `start`, each carrying the state and frontier
/// right after that change.
fn replay_hash(store: &KvStore, reg: &mut Registration, start: &Heads) -> Result<Vec<WatchEvent>> {
    let doc = store.doc();
    let mut leaves = doc.state_at(start)?;
    let mut heads = start.clone();
    let mut events = Vec::new();
    let from: Vec<ChangeHash> = start.iter().copied().collect();
    for change in doc.missing_changes(&from) {
        let hash = change.hash();
        let stamp = Stamp { lamport: change.lamport, hash };
        for op in &change.ops {
            apply_op(&mut leaves, op, stamp);
        }
        for dep in &change.deps {
            heads.remove(dep);
        }
        heads.insert(hash);
        for key in layout::affected_keys(&change).into_iter().filter(|k| reg.range.contains(k)) {
            reg.seen.insert(hash);
            events.push(hash_event(&leaves, store, &key, hash, heads.clone()));
        }
    }
    Ok(events)
}
