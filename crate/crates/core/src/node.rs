//! One cluster member without any I/O of its own.
//!
//! Callers feed requests, peer messages and clock readings in, and drain the
//! peer outbox and watch pushes out. The TCP service and the simulator drive
//! the same type.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::change::{ActorId, Change, ChangeHash, LeafOp};
use crate::durability::{ChangeLog, FsyncPolicy};
use crate::engine::{Document, Heads};
use crate::error::{EngineError, Error, Result};
use crate::kv::{
    member_ops, Batch, Compare, KeyRange, KeyValue, KvStore, MemberRecord, PutArgs, RangeResult,
    ReadAt, RevisionMode, TxnOp, TxnOpResult, ValueSchema,
};
use crate::sync::{PeerMessage, PeerState};
use crate::watch::{WatchPush, WatchSet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: u64,
    pub mode: RevisionMode,
    pub schema: ValueSchema,
    pub name: String,
    /// Direct peers: id and optional address.
    pub peers: Vec<(u64, Option<String>)>,
    pub peer_urls: Vec<String>,
    pub client_urls: Vec<String>,
}

impl NodeConfig {
    pub fn new(node_id: u64, mode: RevisionMode, schema: ValueSchema) -> Self {
        NodeConfig {
            node_id,
            mode,
            schema,
            name: format!("node-{node_id}"),
            peers: Vec::new(),
            peer_urls: Vec::new(),
            client_urls: Vec::new(),
        }
    }

    pub fn with_peers(mut self, peers: impl IntoIterator<Item = u64>) -> Self {
        self.peers = peers.into_iter().map(|p| (p, None)).collect();
        self
    }
}

/// Position reported in every response header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Position {
    Revision(u64),
    Heads(Heads),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub member_id: u64,
    pub position: Position,
}

impl Header {
    pub fn to_json(&self) -> Value {
        match &self.position {
            Position::Revision(r) => json!({"member_id": self.member_id, "revision": r}),
            Position::Heads(h) => json!({
                "member_id": self.member_id,
                "heads": h.iter().map(|h| h.to_hex()).collect::<Vec<_>>(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnOutcome {
    pub succeeded: bool,
    pub results: Vec<TxnOpResult>,
}

#[derive(Debug)]
pub struct Node {
    config: NodeConfig,
    store: KvStore,
    peers: BTreeMap<u64, PeerState>,
    watches: WatchSet,
    outbox: Vec<(u64, PeerMessage)>,
    log: Option<ChangeLog>,
    /// Applied changes not yet in the log, oldest first.
    unpersisted: Vec<ChangeHash>,
    /// Local expiry deadlines for leases this node granted.
    lease_deadlines: BTreeMap<u64, u64>,
    next_lease: u64,
    member_persisted: bool,
}

impl Node {
    pub fn new(config: NodeConfig) -> Result<Self> {
        let doc = Document::new(config.mode);
        Node::build(config, doc, None)
    }

    /// Loads (or creates) the change log in `dir` and persists every change
    /// applied from here on.
    pub fn open(config: NodeConfig, dir: &Path, fsync: FsyncPolicy) -> Result<Self> {
        let (log, loaded) = ChangeLog::open(dir, config.mode, fsync)?;
        Node::build(config, loaded.doc, Some(log))
    }

    fn build(config: NodeConfig, doc: Document, log: Option<ChangeLog>) -> Result<Self> {
        if config.node_id == ActorId::GENESIS.0 {
            return Err(Error::Engine(EngineError::ReservedActor));
        }
        let store = KvStore::new(doc, config.mode, config.schema, ActorId(config.node_id));
        let member_persisted = store.members().iter().any(|m| m.id == config.node_id);
        let peers = config
            .peers
            .iter()
            .filter(|(id, _)| *id != config.node_id)
            .map(|(id, addr)| (*id, PeerState::new(*id, addr.clone())))
            .collect();
        Ok(Node {
            config,
            store,
            peers,
            watches: WatchSet::default(),
            outbox: Vec::new(),
            log,
            unpersisted: Vec::new(),
            lease_deadlines: BTreeMap::new(),
            next_lease: 0,
            member_persisted,
        })
    }

    pub fn id(&self) -> u64 {
        self.config.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn doc(&self) -> &Document {
        self.store.doc()
    }

    pub fn mode(&self) -> RevisionMode {
        self.config.mode
    }

    pub fn heads(&self) -> &Heads {
        self.store.heads()
    }

    pub fn current_revision(&self) -> u64 {
        self.store.current_revision()
    }

    pub fn peer_ids(&self) -> Vec<u64> {
        self.peers.keys().copied().collect()
    }

    pub fn peer(&self, id: u64) -> Option<&PeerState> {
        self.peers.get(&id)
    }

    /// True while some applied change is missing from the log.
    pub fn disk_behind(&self) -> bool {
        !self.unpersisted.is_empty()
    }

    /// First eight bytes of the genesis hash: equal on every node of a
    /// cluster of one mode.
    pub fn cluster_id(&self) -> String {
        self.store.doc().genesis_hash().to_hex()[..16].to_string()
    }

    pub fn header(&self) -> Header {
        let position = match self.config.mode {
            RevisionMode::Counter => Position::Revision(self.store.current_revision()),
            RevisionMode::Hash => Position::Heads(self.store.heads().clone()),
        };
        Header { member_id: self.config.node_id, position }
    }

    fn self_member(&self) -> MemberRecord {
        MemberRecord {
            id: self.config.node_id,
            name: self.config.name.clone(),
            peer_urls: self.config.peer_urls.clone(),
            client_urls: self.config.client_urls.clone(),
        }
    }

    /// Records the changes applied since the last call: log, then watches.
    /// Fails if any of them could not be written.
    fn after_apply(&mut self) -> Result<()> {
        let applied = self.store.take_applied();
        self.unpersisted.extend(applied.iter().copied());
        let mut failure = None;
        if let Some(log) = &mut self.log {
            let mut written = 0;
            for hash in &self.unpersisted {
                let change = self.store.doc().get(hash).expect("applied changes are stored");
                if let Err(e) = log.append(change) {
                    log::error!("change log append failed, memory is ahead of disk: {e}");
                    failure = Some(e);
                    break;
                }
                written += 1;
            }
            self.unpersisted.drain(..written);
        } else {
            self.unpersisted.clear();
        }
        self.watches.on_applied(&self.store, &applied);
        match failure {
            Some(e) => Err(Error::Io(e)),
            None => Ok(()),
        }
    }

    /// Commits one client request's ops as a single change and queues its
    /// broadcast. Empty op lists commit nothing.
    fn commit_ops(&mut self, mut ops: Vec<LeafOp>) -> Result<Option<Change>> {
        if ops.is_empty() {
            return Ok(None);
        }
        if !self.member_persisted {
            ops.extend(member_ops(&self.self_member()));
        }
        let change = self.store.commit(ops)?;
        self.member_persisted = true;
        for peer in self.peers.keys() {
            self.outbox.push((*peer, PeerMessage::Change { from: self.config.node_id, change: change.clone() }));
        }
        self.after_apply()?;
        Ok(Some(change))
    }

    fn write<T>(&mut self, f: impl FnOnce(&mut Batch<'_>) -> Result<T>) -> Result<T> {
        let (value, ops) = {
            let mut batch = self.store.batch();
            let value = f(&mut batch)?;
            (value, batch.into_ops())
        };
        self.commit_ops(ops)?;
        Ok(value)
    }

    pub fn put(&mut self, args: &PutArgs) -> Result<Option<KeyValue>> {
        self.write(|b| b.put(args))
    }

    pub fn range(&self, range: &KeyRange, at: &ReadAt, limit: Option<usize>) -> Result<RangeResult> {
        self.store.read(range, at, limit)
    }

    pub fn get(&self, key: &[u8]) -> Option<KeyValue> {
        self.store.get(key)
    }

    pub fn delete_range(&mut self, range: &KeyRange) -> Result<usize> {
        self.write(|b| Ok(b.delete_range(range)))
    }

    /// Evaluates every compare against one snapshot, runs the chosen branch
    /// and commits all of its writes as one change.
    pub fn txn(&mut self, compares: &[Compare], success: &[TxnOp], failure: &[TxnOp]) -> Result<TxnOutcome> {
        self.write(|b| {
            let mut succeeded = true;
            for cmp in compares {
                succeeded &= b.compare(cmp)?;
            }
            let branch = if succeeded { success } else { failure };
            let mut results = Vec::with_capacity(branch.len());
            for op in branch {
                results.push(match op {
                    TxnOp::Put(args) => {
                        let prev = b.put(args)?;
                        TxnOpResult::Put { prev_kv: prev.filter(|_| args.prev_kv) }
                    }
                    TxnOp::Range { range, limit } => TxnOpResult::Range(b.range(range, *limit)),
                    TxnOp::DeleteRange(range) => TxnOpResult::DeleteRange { deleted: b.delete_range(range) },
                });
            }
            Ok(TxnOutcome { succeeded, results })
        })
    }

    pub fn lease_grant(&mut self, ttl_seconds: u64, id: Option<u64>, now_ms: u64) -> Result<u64> {
        let id = match id {
            Some(id) => id,
            None => loop {
                self.next_lease += 1;
                let candidate = (self.config.node_id << 32) | (self.next_lease & 0xffff_ffff);
                if !self.store.batch().lease_exists(candidate) {
                    break candidate;
                }
            },
        };
        let granted_by = self.config.node_id;
        self.write(|b| b.lease_grant(id, ttl_seconds, granted_by))?;
        self.lease_deadlines.insert(id, now_ms.saturating_add(ttl_seconds.saturating_mul(1000)));
        Ok(id)
    }

    /// Deletes the lease and its keys; returns the keys removed.
    pub fn lease_revoke(&mut self, id: u64) -> Result<Vec<Vec<u8>>> {
        let removed = self.write(|b| b.lease_revoke(id))?;
        self.lease_deadlines.remove(&id);
        Ok(removed)
    }

    /// Revokes leases granted here whose deadline has passed. Leases granted
    /// here before a restart get a fresh full TTL on first sight.
    pub fn expire_leases(&mut self, now_ms: u64) -> Vec<u64> {
        for lease in self.store.leases() {
            if lease.granted_by == self.config.node_id {
                self.lease_deadlines
                    .entry(lease.id)
                    .or_insert(now_ms.saturating_add(lease.ttl_seconds.saturating_mul(1000)));
            }
        }
        let due: Vec<u64> =
            self.lease_deadlines.iter().filter(|(_, d)| **d <= now_ms).map(|(id, _)| *id).collect();
        let mut revoked = Vec::new();
        for id in due {
            self.lease_deadlines.remove(&id);
            match self.lease_revoke(id) {
                Ok(_) => revoked.push(id),
                Err(Error::UnknownLease(_)) => {}
                Err(e) => log::warn!("expiring lease {id}: {e}"),
            }
        }
        revoked
    }

    pub fn leases(&self) -> Vec<crate::kv::LeaseRecord> {
        self.store.leases()
    }

    /// Members recorded in the document; this node is included from its
    /// configuration until its own record has been committed.
    pub fn members(&self) -> Vec<MemberRecord> {
        let mut members = self.store.members();
        if !members.iter().any(|m| m.id == self.config.node_id) {
            members.push(self.self_member());
            members.sort_by_key(|m| m.id);
        }
        members
    }

    pub fn watch_create(&mut self, range: KeyRange, start: Option<ReadAt>) -> Result<u64> {
        self.watches.create(&self.store, range, start)
    }

    pub fn watch_cancel(&mut self, id: u64) -> Result<()> {
        if self.watches.cancel(id) {
            Ok(())
        } else {
            Err(Error::UnknownWatch(id))
        }
    }

    pub fn take_watch_pushes(&mut self) -> Vec<WatchPush> {
        self.watches.take_pushes()
    }

    /// Peer messages queued by local commits, as (peer id, message).
    pub fn take_outbox(&mut self) -> Vec<(u64, PeerMessage)> {
        std::mem::take(&mut self.outbox)
    }

    /// Per direct peer: whether every hash lies in that peer's last reported
    /// history.
    pub fn replication_status(&self, hashes: &[ChangeHash]) -> Result<BTreeMap<u64, bool>> {
        if self.config.mode != RevisionMode::Hash {
            return Err(Error::ModeUnsupported("counter"));
        }
        let doc = self.store.doc();
        for h in hashes {
            if !doc.contains(h) {
                return Err(Error::Engine(EngineError::UnknownHash(*h)));
            }
        }
        self.peers
            .iter()
            .map(|(id, state)| Ok((*id, doc.covered_by(hashes, &state.last_known_heads)?)))
            .collect()
    }

    /// Opens a sync round with `peer`.
    pub fn begin_sync(&mut self, peer: u64, now_ms: u64) -> Option<PeerMessage> {
        let doc = self.store.doc();
        let state = self.peers.get_mut(&peer)?;
        state.awaiting = true;
        state.last_sync_at_ms = Some(now_ms);
        Some(PeerMessage::SyncReq {
            from: self.config.node_id,
            heads: doc.heads().iter().copied().collect(),
            shared: state.shared_heads(doc).into_iter().collect(),
        })
    }

    fn apply_changes(&mut self, changes: Vec<Change>) {
        for change in changes {
            let hash = change.hash();
            if let Err(e) = self.store.apply_remote(change) {
                log::warn!("node {}: rejected change {hash}: {e}", self.config.node_id);
            }
        }
        if let Err(e) = self.after_apply() {
            log::warn!("node {}: {e}", self.config.node_id);
        }
    }

    /// Handles one peer message; returns the replies for its sender.
    /// Changes received here are never re-broadcast.
    pub fn handle_peer_message(&mut self, msg: PeerMessage) -> Vec<PeerMessage> {
        let from = msg.from();
        if !self.peers.contains_key(&from) {
            log::warn!("node {}: ignoring message from unconfigured peer {from}", self.config.node_id);
            return Vec::new();
        }
        let me = self.config.node_id;
        match msg {
            PeerMessage::Change { change, .. } => {
                self.apply_changes(vec![change]);
                Vec::new()
            }
            PeerMessage::SyncReq { heads, shared, .. } => {
                let state = self.peers.get_mut(&from).expect("checked above");
                state.last_known_heads = heads.iter().copied().collect();
                let mut query = heads;
                query.extend(shared);
                let doc = self.store.doc();
                vec![PeerMessage::SyncResp {
                    from: me,
                    heads: doc.heads().iter().copied().collect(),
                    changes: doc.missing_changes(&query),
                }]
            }
            PeerMessage::SyncResp { heads, changes, .. } => {
                let received = !changes.is_empty();
                self.apply_changes(changes);
                let state = self.peers.get_mut(&from).expect("checked above");
                let awaiting = std::mem::replace(&mut state.awaiting, false);
                let mut query = heads.clone();
                query.extend(state.last_known_heads.iter().copied());
                state.last_known_heads = heads.into_iter().collect();
                let doc = self.store.doc();
                let reply = |changes| PeerMessage::SyncResp {
                    from: me,
                    heads: doc.heads().iter().copied().collect(),
                    changes,
                };
                if awaiting {
                    let missing = doc.missing_changes(&query);
                    if !missing.is_empty() || received {
                        return vec![reply(missing)];
                    }
                } else if received {
                    return vec![reply(Vec::new())];
                }
                Vec::new()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(mode: RevisionMode) -> (Node, Node) {
        let a = Node::new(NodeConfig::new(1, mode, ValueSchema::Bytes).with_peers([2])).unwrap();
        let b = Node::new(NodeConfig::new(2, mode, ValueSchema::Bytes).with_peers([1])).unwrap();
        (a, b)
    }

    fn put(n: &mut Node, k: &str, v: &str) {
        n.put(&PutArgs { key: k.into(), value: v.into(), lease: None, prev_kv: false }).unwrap();
    }

    /// Runs a full round started by `a`; returns the number of messages.
    fn round(a: &mut Node, b: &mut Node) -> usize {
        let mut in_flight = vec![(b.id(), a.begin_sync(b.id(), 0).unwrap())];
        let mut count = 0;
        while let Some((to, msg)) = in_flight.pop() {
            count += 1;
            let (target, other) = if to == a.id() { (&mut *a, &mut *b) } else { (&mut *b, &mut *a) };
            for reply in target.handle_peer_message(msg) {
                in_flight.push((other.id(), reply));
            }
        }
        count
    }

    #[test]
    fn node_zero_is_reserved() {
        assert!(Node::new(NodeConfig::new(0, RevisionMode::Hash, ValueSchema::Bytes)).is_err());
    }

    #[test]
    fn commits_queue_one_broadcast_per_peer() {
        let (mut a, mut b) = pair(RevisionMode::Hash);
        put(&mut a, "k", "v");
        let out = a.take_outbox();
        assert_eq!(out.len(), 1);
        for (_, msg) in out {
            assert!(b.handle_peer_message(msg).is_empty());
        }
        assert_eq!(b.heads(), a.heads());
        assert!(b.take_outbox().is_empty(), "received changes are not relayed");
    }

    #[test]
    fn sync_round_converges_and_terminates() {
        let (mut a, mut b) = pair(RevisionMode::Hash);
        put(&mut a, "x", "1");
        put(&mut b, "y", "2");
        a.take_outbox();
        b.take_outbox();
        let messages = round(&mut a, &mut b);
        assert_eq!(a.heads(), b.heads());
        assert_eq!(messages, 4);
        assert_eq!(round(&mut a, &mut b), 2, "in-sync round is a single exchange");
        let head: Vec<_> = a.heads().iter().copied().collect();
        assert_eq!(a.replication_status(&head).unwrap()[&2], true);
        assert_eq!(b.replication_status(&head).unwrap()[&1], true);
    }

    #[test]
    fn replication_status_is_false_before_sync() {
        let (mut a, _b) = pair(RevisionMode::Hash);
        put(&mut a, "x", "1");
        let head: Vec<_> = a.heads().iter().copied().collect();
        assert_eq!(a.replication_status(&head).unwrap()[&2], false);
        let genesis = a.doc().genesis_hash();
        assert_eq!(a.replication_status(&[genesis]).unwrap()[&2], false);
        let (mut c, _) = pair(RevisionMode::Counter);
        put(&mut c, "x", "1");
        assert!(matches!(c.replication_status(&[genesis]), Err(Error::ModeUnsupported(_))));
    }

    #[test]
    fn member_record_rides_on_first_change() {
        let (mut a, mut b) = pair(RevisionMode::Counter);
        assert_eq!(a.members().len(), 1);
        put(&mut a, "x", "1");
        assert_eq!(a.current_revision(), 2);
        round(&mut a, &mut b);
        assert_eq!(b.members().iter().map(|m| m.id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn lease_expiry_revokes_at_granting_node() {
        let (mut a, _b) = pair(RevisionMode::Counter);
        let id = a.lease_grant(2, None, 1_000).unwrap();
        assert_eq!(id >> 32, 1);
        a.put(&PutArgs { key: b"k".to_vec(), value: b"v".to_vec(), lease: Some(id), prev_kv: false }).unwrap();
        assert!(a.expire_leases(2_999).is_empty());
        assert_eq!(a.expire_leases(3_000), vec![id]);
        assert!(a.get(b"k").is_none());
        assert!(a.leases().is_empty());
    }
}
