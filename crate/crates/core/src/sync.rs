//! Peer protocol messages, per-peer replication state and topologies.
//!
//! A sync round is a heads exchange: the initiator sends its heads, the
//! responder answers with the changes the initiator lacks plus its own heads,
//! and the initiator finishes with the changes the responder lacks. Receiving
//! changes outside an awaited reply triggers one empty acknowledgement so the
//! sender learns the resulting heads.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::change::{Change, ChangeHash};
use crate::engine::{Document, Heads};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PeerMessage {
    Change { from: u64, change: Change },
    SyncReq { from: u64, heads: Vec<ChangeHash>, shared: Vec<ChangeHash> },
    SyncResp { from: u64, heads: Vec<ChangeHash>, changes: Vec<Change> },
}

impl PeerMessage {
    pub fn from(&self) -> u64 {
        match self {
            PeerMessage::Change { from, .. }
            | PeerMessage::SyncReq { from, .. }
            | PeerMessage::SyncResp { from, .. } => *from,
        }
    }

    /// Changes carried by this message.
    pub fn changes(&self) -> &[Change] {
        match self {
            PeerMessage::Change { change, .. } => std::slice::from_ref(change),
            PeerMessage::SyncReq { .. } => &[],
            PeerMessage::SyncResp { changes, .. } => changes,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("peer message serialization is infallible")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Malformed(format!("peer message: {e}")))
    }
}

/// What this node knows about one direct peer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PeerState {
    pub peer_id: u64,
    pub address: Option<String>,
    /// Heads the peer last reported as applied.
    pub last_known_heads: Heads,
    pub last_sync_at_ms: Option<u64>,
    /// A sync request to this peer is outstanding.
    pub awaiting: bool,
}

impl PeerState {
    pub fn new(peer_id: u64, address: Option<String>) -> Self {
        PeerState { peer_id, address, ..Default::default() }
    }

    /// The peer's last reported heads that are also in our history: the
    /// greatest frontier both sides are known to share.
    pub fn shared_heads(&self, doc: &Document) -> Heads {
        self.last_known_heads.iter().filter(|h| doc.contains(h)).copied().collect()
    }
}

/// Undirected peer graph over node ids `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub nodes: usize,
    adjacency: BTreeMap<u64, BTreeSet<u64>>,
}

impl Topology {
    pub fn mesh(nodes: usize) -> Self {
        let mut edges = Vec::new();
        for a in 0..nodes as u64 {
            for b in (a + 1)..nodes as u64 {
                edges.push((a, b));
            }
        }
        Topology::from_edges(nodes, &edges).expect("mesh edges are in range")
    }

    pub fn chain(nodes: usize) -> Self {
        let edges: Vec<(u64, u64)> = (1..nodes as u64).map(|i| (i - 1, i)).collect();
        Topology::from_edges(nodes, &edges).expect("chain edges are in range")
    }

    pub fn from_edges(nodes: usize, edges: &[(u64, u64)]) -> Result<Self> {
        let mut adjacency: BTreeMap<u64, BTreeSet<u64>> =
            (0..nodes as u64).map(|n| (n, BTreeSet::new())).collect();
        for &(a, b) in edges {
            if a == b || a >= nodes as u64 || b >= nodes as u64 {
                return Err(Error::Malformed(format!("edge {a}-{b} does not join two of {nodes} nodes")));
            }
            adjacency.get_mut(&a).expect("in range").insert(b);
            adjacency.get_mut(&b).expect("in range").insert(a);
        }
        Ok(Topology { nodes, adjacency })
    }

    pub fn peers(&self, node: u64) -> Vec<u64> {
        self.adjacency.get(&node).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn has_edge(&self, a: u64, b: u64) -> bool {
        self.adjacency.get(&a).is_some_and(|s| s.contains(&b))
    }

    /// Longest shortest path; `None` if the graph is disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut worst = 0;
        for &start in self.adjacency.keys() {
            let mut dist: BTreeMap<u64, usize> = BTreeMap::from([(start, 0)]);
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                let d = dist[&n];
                for &next in &self.adjacency[&n] {
                    if !dist.contains_key(&next) {
                        dist.insert(next, d + 1);
                        queue.push_back(next);
                    }
                }
            }
            if dist.len() != self.nodes {
                return None;
            }
            worst = worst.max(dist.values().copied().max().unwrap_or(0));
        }
        Some(worst)
    }
}
