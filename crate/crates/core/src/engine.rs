//! The CRDT document: a store of hash-linked changes materialized into a
//! nested map of stamped leaves.
//!
//! Every leaf remembers the stamp `(lamport, change hash)` of the op that last
//! won it, deletes included, so merging is a per-leaf max over stamps and
//! does not depend on arrival order.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};

use crate::change::{Action, ActorId, Change, ChangeHash, LeafOp, LeafValue, Path};
use crate::error::EngineError;
use crate::kv::RevisionMode;

/// Orders concurrent writes to one leaf: lamport first, then change hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stamp {
    pub lamport: u64,
    pub hash: ChangeHash,
}

/// Returns the winning stamp. Total, symmetric and deterministic.
pub fn winner(a: Stamp, b: Stamp) -> Stamp {
    a.max(b)
}

/// A materialized leaf. `value == None` is a delete that still carries its
/// stamp so that older concurrent writes cannot resurrect the leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leaf {
    pub value: Option<LeafValue>,
    pub stamp: Stamp,
}

pub type Leaves = BTreeMap<Path, Leaf>;
pub type Heads = BTreeSet<ChangeHash>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Buffered,
    Duplicate,
}

/// Builds the deterministic root change every node starts from.
pub fn genesis_change(mode: RevisionMode) -> Change {
    let mut ops: Vec<LeafOp> = ["kvs", "leases", "members", "cluster"]
        .iter()
        .map(|k| LeafOp::set(vec![k.to_string()], LeafValue::Map))
        .collect();
    if mode == RevisionMode::Counter {
        ops.push(LeafOp::set(
            vec!["cluster".to_string(), "revision".to_string()],
            LeafValue::Int(1),
        ));
    }
    Change::new(ActorId::GENESIS, 1, 1, BTreeSet::new(), ops)
}

/// Applies one op under the winner rule. Ops from the same change share a
/// stamp; the later op in the sequence wins.
pub(crate) fn apply_op(leaves: &mut Leaves, op: &LeafOp, stamp: Stamp) {
    let value = match op.action {
        Action::Set => op.value.clone(),
        Action::Del => None,
    };
    match leaves.get_mut(&op.path) {
        Some(leaf) if leaf.stamp > stamp => {}
        Some(leaf) => *leaf = Leaf { value, stamp },
        None => {
            leaves.insert(op.path.clone(), Leaf { value, stamp });
        }
    }
}

pub fn is_antichain(doc: &Document, heads: &Heads) -> Result<bool, EngineError> {
    for a in heads {
        for b in heads {
            if a != b && doc.is_ancestor(a, b)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Clone, Debug)]
pub struct Document {
    changes: HashMap<ChangeHash, Change>,
    /// Application order; always a linear extension of the DAG.
    order: Vec<ChangeHash>,
    heads: Heads,
    leaves: Leaves,
    max_seq: HashMap<ActorId, u64>,
    /// Buffered changes keyed by the dependency they are waiting for.
    waiting_on: HashMap<ChangeHash, Vec<ChangeHash>>,
    buffered: HashMap<ChangeHash, Change>,
    newly_applied: Vec<ChangeHash>,
    genesis: ChangeHash,
}

impl Document {
    pub fn new(mode: RevisionMode) -> Self {
        let genesis = genesis_change(mode);
        let mut doc = Document {
            changes: HashMap::new(),
            order: Vec::new(),
            heads: Heads::new(),
            leaves: Leaves::new(),
            max_seq: HashMap::new(),
            waiting_on: HashMap::new(),
            buffered: HashMap::new(),
            newly_applied: Vec::new(),
            genesis: genesis.hash(),
        };
        doc.store(genesis);
        doc
    }

    pub fn genesis_hash(&self) -> ChangeHash {
        self.genesis
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn leaves(&self) -> &Leaves {
        &self.leaves
    }

    pub fn get(&self, hash: &ChangeHash) -> Option<&Change> {
        self.changes.get(hash)
    }

    pub fn contains(&self, hash: &ChangeHash) -> bool {
        self.changes.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Stored changes in application order (deps before dependents).
    pub fn changes(&self) -> impl Iterator<Item = &Change> + '_ {
        self.order.iter().map(move |h| &self.changes[h])
    }

    pub fn buffered_len(&self) -> usize {
        self.buffered.len()
    }

    /// Drains the hashes of changes applied since the last call, in
    /// application order. Genesis is never reported.
    pub fn take_applied(&mut self) -> Vec<ChangeHash> {
        std::mem::take(&mut self.newly_applied)
    }

    fn next_seq(&self, actor: ActorId) -> u64 {
        self.max_seq.get(&actor).copied().unwrap_or(0) + 1
    }

    fn lamport_of(&self, hash: &ChangeHash) -> u64 {
        self.changes[hash].lamport
    }

    /// Creates a local change on top of the current heads.
    pub fn commit(&mut self, actor: ActorId, ops: Vec<LeafOp>) -> Result<Change, EngineError> {
        if actor == ActorId::GENESIS {
            return Err(EngineError::ReservedActor);
        }
        if ops.is_empty() {
            return Err(EngineError::EmptyCommit);
        }
        for op in &ops {
            op.validate()?;
        }
        let lamport = 1 + self.heads.iter().map(|h| self.lamport_of(h)).max().unwrap_or(0);
        let change = Change::new(actor, self.next_seq(actor), lamport, self.heads.clone(), ops);
        self.store(change.clone());
        self.newly_applied.push(change.hash());
        Ok(change)
    }

    /// Merges a change received from elsewhere.
    pub fn apply_remote(&mut self, change: Change) -> Result<ApplyOutcome, EngineError> {
        if !change.verify_hash() {
            let computed = ChangeHash::of_bytes(&change.canonical_bytes());
            return Err(EngineError::HashMismatch { claimed: change.hash(), computed });
        }
        let hash = change.hash();
        if self.changes.contains_key(&hash) {
            return Ok(ApplyOutcome::Duplicate);
        }
        if self.buffered.contains_key(&hash) {
            return Ok(ApplyOutcome::Buffered);
        }
        self.check_shape(&change)?;
        if let Some(missing) = change.deps.iter().find(|d| !self.changes.contains_key(d)).copied() {
            self.waiting_on.entry(missing).or_default().push(hash);
            self.buffered.insert(hash, change);
            return Ok(ApplyOutcome::Buffered);
        }
        self.check_against_deps(&change)?;
        self.store(change);
        self.newly_applied.push(hash);
        self.release_waiting(hash);
        Ok(ApplyOutcome::Applied)
    }

    fn check_shape(&self, change: &Change) -> Result<(), EngineError> {
        let invalid = |reason: &str| EngineError::InvalidChange {
            hash: change.hash(),
            reason: reason.to_string(),
        };
        if change.deps.is_empty() {
            return Err(invalid("foreign genesis or missing deps"));
        }
        if change.actor == ActorId::GENESIS {
            return Err(invalid("actor 0 is reserved for genesis"));
        }
        if change.ops.is_empty() {
            return Err(invalid("no ops"));
        }
        if change.seq == 0 {
            return Err(invalid("seq must start at 1"));
        }
        for op in &change.ops {
            op.validate()?;
        }
        Ok(())
    }

    fn check_against_deps(&self, change: &Change) -> Result<(), EngineError> {
        let expected_lamport = 1 + change.deps.iter().map(|d| self.lamport_of(d)).max().unwrap_or(0);
        if change.lamport != expected_lamport {
            return Err(EngineError::InvalidChange {
                hash: change.hash(),
                reason: format!("lamport {} but deps imply {expected_lamport}", change.lamport),
            });
        }
        let expected_seq = self.next_seq(change.actor);
        if change.seq != expected_seq {
            return Err(EngineError::InvalidChange {
                hash: change.hash(),
                reason: format!("seq {} but actor {} is at {}", change.seq, change.actor, expected_seq - 1),
            });
        }
        Ok(())
    }

    fn release_waiting(&mut self, arrived: ChangeHash) {
        let mut ready = vec![arrived];
        while let Some(dep) = ready.pop() {
            let Some(waiters) = self.waiting_on.remove(&dep) else { continue };
            for w in waiters {
                let Some(change) = self.buffered.remove(&w) else { continue };
                if let Some(missing) = change.deps.iter().find(|d| !self.changes.contains_key(d)).copied() {
                    self.waiting_on.entry(missing).or_default().push(w);
                    self.buffered.insert(w, change);
                    continue;
                }
                if let Err(e) = self.check_against_deps(&change) {
                    log::warn!("dropping buffered change: {e}");
                    continue;
                }
                self.store(change);
                self.newly_applied.push(w);
                ready.push(w);
            }
        }
    }

    /// Inserts a change whose deps are all present.
    fn store(&mut self, change: Change) {
        let hash = change.hash();
        let stamp = Stamp { lamport: change.lamport, hash };
        for op in &change.ops {
            apply_op(&mut self.leaves, op, stamp);
        }
        for dep in &change.deps {
            self.heads.remove(dep);
        }
        self.heads.insert(hash);
        self.max_seq.insert(change.actor, change.seq);
        self.order.push(hash);
        self.changes.insert(hash, change);
    }

    fn require(&self, hash: &ChangeHash) -> Result<(), EngineError> {
        if self.changes.contains_key(hash) {
            Ok(())
        } else {
            Err(EngineError::UnknownHash(*hash))
        }
    }

    /// True iff `ancestor` is reachable from `descendant` through deps.
    pub fn is_ancestor(&self, ancestor: &ChangeHash, descendant: &ChangeHash) -> Result<bool, EngineError> {
        self.require(ancestor)?;
        self.require(descendant)?;
        if ancestor == descendant {
            return Ok(false);
        }
        Ok(self.reaches(descendant, ancestor))
    }

    /// Reachability over deps, pruned by lamport (strictly decreasing along deps).
    fn reaches(&self, from: &ChangeHash, target: &ChangeHash) -> bool {
        let floor = self.lamport_of(target);
        let mut seen = HashSet::new();
        let mut stack = vec![*from];
        while let Some(h) = stack.pop() {
            for dep in &self.changes[&h].deps {
                if dep == target {
                    return true;
                }
                if self.lamport_of(dep) > floor && seen.insert(*dep) {
                    stack.push(*dep);
                }
            }
        }
        false
    }

    /// True iff every hash in `hashes` is in the ancestor closure (inclusive)
    /// of the known members of `heads`.
    pub fn covered_by(&self, hashes: &[ChangeHash], heads: &Heads) -> Result<bool, EngineError> {
        for h in hashes {
            self.require(h)?;
        }
        let known: Vec<&ChangeHash> = heads.iter().filter(|h| self.contains(h)).collect();
        Ok(hashes
            .iter()
            .all(|h| known.iter().any(|k| *k == h || self.reaches(k, h))))
    }

    /// Inclusive ancestor closure of `heads`. Unknown hashes are errors.
    pub fn closure(&self, heads: &Heads) -> Result<HashSet<ChangeHash>, EngineError> {
        for h in heads {
            self.require(h)?;
        }
        let mut seen: HashSet<ChangeHash> = heads.iter().copied().collect();
        let mut stack: Vec<ChangeHash> = heads.iter().copied().collect();
        while let Some(h) = stack.pop() {
            for dep in &self.changes[&h].deps {
                if seen.insert(*dep) {
                    stack.push(*dep);
                }
            }
        }
        Ok(seen)
    }

    /// Leaves produced by replaying exactly the ancestor closure of `at`.
    pub fn state_at(&self, at: &Heads) -> Result<Leaves, EngineError> {
        let closure = self.closure(at)?;
        let mut leaves = Leaves::new();
        for h in self.order.iter().filter(|h| closure.contains(h)) {
            let change = &self.changes[h];
            let stamp = Stamp { lamport: change.lamport, hash: *h };
            for op in &change.ops {
                apply_op(&mut leaves, op, stamp);
            }
        }
        Ok(leaves)
    }

    /// Stored changes outside the closure of the known members of
    /// `their_heads`, deps first. With no known head, everything is returned.
    pub fn missing_changes(&self, their_heads: &[ChangeHash]) -> Vec<Change> {
        let known: Vec<ChangeHash> =
            their_heads.iter().filter(|h| self.contains(h)).copied().collect();
        if known.is_empty() {
            return self.changes().cloned().collect();
        }
        self.missing_hashes(&known)
            .into_iter()
            .map(|h| self.changes[&h].clone())
            .collect()
    }

    /// Two-colour walk from both frontiers in descending (lamport, hash)
    /// order; stops once no purely-ours node remains queued.
    fn missing_hashes(&self, theirs: &[ChangeHash]) -> Vec<ChangeHash> {
        const OURS: u8 = 1;
        const THEIRS: u8 = 2;
        let mut colour: HashMap<ChangeHash, u8> = HashMap::new();
        let mut heap: BinaryHeap<(u64, ChangeHash)> = BinaryHeap::new();
        let mut ours_only = 0usize;

        let mark = |h: ChangeHash,
                        c: u8,
                        colour: &mut HashMap<ChangeHash, u8>,
                        heap: &mut BinaryHeap<(u64, ChangeHash)>,
                        ours_only: &mut usize| {
            match colour.get_mut(&h) {
                None => {
                    colour.insert(h, c);
                    heap.push((self.lamport_of(&h), h));
                    if c == OURS {
                        *ours_only += 1;
                    }
                }
                Some(existing) => {
                    if *existing == OURS && c & THEIRS != 0 {
                        *ours_only -= 1;
                    }
                    *existing |= c;
                }
            }
        };

        for h in &self.heads {
            mark(*h, OURS, &mut colour, &mut heap, &mut ours_only);
        }
        for h in theirs {
            mark(*h, THEIRS, &mut colour, &mut heap, &mut ours_only);
        }

        let mut out = Vec::new();
        while ours_only > 0 {
            let Some((_, h)) = heap.pop() else { break };
            let c = colour[&h];
            let propagate = if c & THEIRS != 0 {
                THEIRS
            } else {
                ours_only -= 1;
                out.push(h);
                OURS
            };
            for dep in &self.changes[&h].deps {
                mark(*dep, propagate, &mut colour, &mut heap, &mut ours_only);
            }
        }
        out.reverse();
        out
    }
}

/// Heads of an arbitrary deps-closed set of changes.
pub fn heads_of<'a>(changes: impl IntoIterator<Item = &'a Change>) -> Heads {
    let list: Vec<&Change> = changes.into_iter().collect();
    let referenced: HashSet<ChangeHash> = list.iter().flat_map(|c| c.deps.iter().copied()).collect();
    list.iter().map(|c| c.hash()).filter(|h| !referenced.contains(h)).collect()
}
