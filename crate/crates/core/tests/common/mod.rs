#![allow(dead_code)]

use causal_kv_core::kv::PutArgs;
use causal_kv_core::{Node, NodeConfig, PeerMessage, RevisionMode, ValueSchema};

/// Nodes with ids 1..=n wired as a full mesh; messages move only when a test
/// asks for it.
pub struct Cluster {
    pub nodes: Vec<Node>,
}

impl Cluster {
    pub fn new(n: u64, mode: RevisionMode, schema: ValueSchema) -> Self {
        let nodes = (1..=n)
            .map(|id| {
                let peers = (1..=n).filter(|p| *p != id);
                Node::new(NodeConfig::new(id, mode, schema).with_peers(peers)).unwrap()
            })
            .collect();
        Cluster { nodes }
    }

    pub fn node(&mut self, id: u64) -> &mut Node {
        &mut self.nodes[(id - 1) as usize]
    }

    pub fn put(&mut self, id: u64, key: &[u8], value: &[u8]) {
        self.node(id)
            .put(&PutArgs { key: key.to_vec(), value: value.to_vec(), lease: None, prev_kv: false })
            .unwrap();
    }

    /// Throws away queued broadcasts, as if every link dropped them.
    pub fn drop_broadcasts(&mut self) {
        for n in &mut self.nodes {
            n.take_outbox();
        }
    }

    /// Delivers queued broadcasts; returns how many were delivered.
    pub fn deliver_broadcasts(&mut self) -> usize {
        let mut queued = Vec::new();
        for n in &mut self.nodes {
            queued.extend(n.take_outbox());
        }
        let count = queued.len();
        for (to, msg) in queued {
            let replies = self.node(to).handle_peer_message(msg);
            assert!(replies.is_empty());
        }
        count
    }

    /// One sync round initiated by `from` towards `to`, run to completion.
    /// Returns the messages exchanged.
    pub fn sync(&mut self, from: u64, to: u64) -> Vec<PeerMessage> {
        let first = self.node(from).begin_sync(to, 0).expect("configured peer");
        let mut log = Vec::new();
        let mut in_flight = vec![(to, first)];
        while let Some((dest, msg)) = in_flight.pop() {
            log.push(msg.clone());
            let sender = msg.from();
            for reply in self.node(dest).handle_peer_message(msg) {
                in_flight.push((sender, reply));
            }
        }
        log
    }

    pub fn converged(&self) -> bool {
        self.nodes.windows(2).all(|w| w[0].heads() == w[1].heads() && w[0].doc().leaves() == w[1].doc().leaves())
    }
}
