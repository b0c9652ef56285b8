//! Single-threaded discrete-event simulation of a cluster. Every node is a
//! FIFO server: a job's effects on the node happen when service starts and
//! its outputs (responses, sends) leave when service ends.

use std::collections::{BTreeMap, VecDeque};

use causal_kv_core::kv::{KeyRange, PutArgs, ReadAt};
use causal_kv_core::{ChangeHash, Node, NodeConfig, PeerMessage};
use serde::Serialize;

use crate::delay::LinkDelay;
use crate::metrics::{MetricRecord, Status};
use crate::scenario::{Action, EventSpec, Scenario};
use crate::workload::{OpKind, Workload, WorkloadRequest};
use crate::SimError;

/// Ground truth for one peer message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub id: u64,
    pub from: u64,
    pub to: u64,
    pub kind: &'static str,
    pub bytes: usize,
    pub changes: Vec<ChangeHash>,
    pub sent_us: u64,
    /// Arrival in the receiver's queue.
    pub delivered_us: Option<u64>,
    pub dropped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HealRecord {
    pub at_us: u64,
    /// First instant after the heal at which all nodes had equal heads.
    pub converged_us: Option<u64>,
}

impl HealRecord {
    pub fn convergence_us(&self) -> Option<u64> {
        self.converged_us.map(|c| c - self.at_us)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
    pub final_heads: BTreeMap<u64, Vec<String>>,
    pub changes_per_node: BTreeMap<u64, usize>,
    pub converged: bool,
    pub heals: Vec<HealRecord>,
    pub messages_sent: usize,
    pub messages_delivered: usize,
    pub messages_dropped: usize,
    pub end_us: u64,
}

#[derive(Debug)]
enum Event {
    Arrival(usize),
    Deliver(u64),
    Tick { node: u64, peer: u64 },
    Done(u64),
    Control(usize),
}

#[derive(Debug)]
enum Job {
    Request(usize),
    Message(PeerMessage),
    Sync(u64),
}

enum Output {
    Send(u64, PeerMessage),
    Complete(usize, Status),
}

struct Server {
    node: Node,
    queue: VecDeque<Job>,
    busy: bool,
    pending: Vec<Output>,
}

struct Link {
    delay: LinkDelay,
    partitioned: bool,
    last_delivery_us: u64,
}

struct Request {
    req: WorkloadRequest,
    node: u64,
    issue_us: u64,
    outcome: Option<(Status, u64)>,
}

pub struct Simulation {
    scenario: Scenario,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    servers: Vec<Server>,
    links: BTreeMap<(u64, u64), Link>,
    messages: Vec<MessageRecord>,
    in_flight: BTreeMap<u64, (u64, PeerMessage)>,
    requests: Vec<Request>,
    heals: Vec<HealRecord>,
    diameter: Option<usize>,
    end_us: u64,
}

fn link_seed(seed: u64, from: u64, to: u64) -> u64 {
    seed ^ ((from << 32) | to).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn kind(msg: &PeerMessage) -> &'static str {
    match msg {
        PeerMessage::Change { .. } => "change",
        PeerMessage::SyncReq { .. } => "sync_req",
        PeerMessage::SyncResp { .. } => "sync_resp",
    }
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let n = scenario.nodes as u64;
        let topology = scenario.topology.build(scenario.nodes)?;
        let mut servers = Vec::new();
        let mut links = BTreeMap::new();
        for i in 0..n {
            let peers: Vec<u64> = topology.peers(i).into_iter().map(|p| p + 1).collect();
            for &p in &peers {
                let l = &scenario.link;
                links.insert(
                    (i + 1, p),
                    Link {
                        delay: LinkDelay::new(l.delay_ms, l.variation, l.correlation, link_seed(seed, i + 1, p)),
                        partitioned: false,
                        last_delivery_us: 0,
                    },
                );
            }
            let config = NodeConfig::new(i + 1, scenario.mode, scenario.schema).with_peers(peers);
            servers.push(Server { node: Node::new(config)?, queue: VecDeque::new(), busy: false, pending: Vec::new() });
        }

        let mut sim = Simulation {
            scenario: scenario.clone(),
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            servers,
            diameter: topology.diameter(),
            links,
            messages: Vec::new(),
            in_flight: BTreeMap::new(),
            requests: Vec::new(),
            heals: Vec::new(),
            end_us: 0,
        };

        for (i, e) in scenario.events.iter().enumerate() {
            sim.schedule(e.t_ms * 1000, Event::Control(i));
        }
        if let Some(interval) = scenario.sync_interval_ms {
            let interval_us = interval * 1000;
            let pairs: Vec<(u64, u64)> = sim.links.keys().copied().collect();
            for (k, (node, peer)) in pairs.iter().enumerate() {
                // Phases spread evenly so no two rounds start together.
                let phase = interval_us * k as u64 / pairs.len() as u64;
                sim.schedule(phase, Event::Tick { node: *node, peer: *peer });
            }
        }
        let mut last_input_us = scenario.events.last().map_or(0, |e| e.t_ms * 1000);
        if let Some(spec) = &scenario.workload {
            last_input_us = last_input_us.max((spec.duration_s * 1e6).round() as u64);
            for req in Workload::new(spec.clone(), seed) {
                let at = req.at_us;
                let idx = sim.requests.len();
                sim.requests.push(Request { req, node: scenario.serving_node, issue_us: at, outcome: None });
                sim.schedule(at, Event::Arrival(idx));
            }
        }
        sim.end_us = last_input_us + scenario.quiescence_ms * 1000;
        Ok(sim)
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    pub fn end_us(&self) -> u64 {
        self.end_us
    }

    /// Diameter of the configured topology; `None` if disconnected.
    pub fn diameter(&self) -> Option<usize> {
        self.diameter
    }

    /// Largest delay any link can currently produce.
    pub fn max_link_delay_us(&self) -> u64 {
        self.links.values().map(|l| l.delay.max_us()).max().unwrap_or(0)
    }

    pub fn node(&self, id: u64) -> &Node {
        &self.servers[id as usize - 1].node
    }

    pub fn node_ids(&self) -> impl Iterator<Item = u64> {
        1..=self.servers.len() as u64
    }

    pub fn messages(&self) -> &[MessageRecord] {
        &self.messages
    }

    pub fn heals(&self) -> &[HealRecord] {
        &self.heals
    }

    pub fn heads_equal(&self) -> bool {
        let first = self.servers[0].node.heads();
        self.servers.iter().all(|s| s.node.heads() == first)
    }

    /// Whether the ground-truth log shows `hash` reaching `peer`, or `peer`
    /// authored it.
    pub fn delivered_to(&self, peer: u64, hash: &ChangeHash) -> bool {
        let authored = self.node(peer).doc().get(hash).is_some_and(|c| c.actor.0 == peer);
        authored || self.messages.iter().any(|m| m.to == peer && m.delivered_us.is_some() && m.changes.contains(hash))
    }

    /// Completed and timed-out requests so far, by request id.
    pub fn metrics(&self) -> Vec<MetricRecord> {
        self.requests
            .iter()
            .filter_map(|r| {
                r.outcome.map(|(status, complete_us)| MetricRecord {
                    request_id: r.req.id,
                    op: r.req.op.as_str().to_string(),
                    issue_us: r.issue_us,
                    complete_us,
                    status,
                    node: r.node,
                })
            })
            .collect()
    }

    /// Issues a client request to `node` now; returns its request id.
    pub fn submit(&mut self, node: u64, op: OpKind, key: &[u8], value: &[u8]) -> u64 {
        let id = self.requests.len() as u64;
        let req = WorkloadRequest { id, at_us: self.now, op, key: key.to_vec(), value: value.to_vec() };
        self.requests.push(Request { req, node, issue_us: self.now, outcome: None });
        self.schedule(self.now, Event::Arrival(id as usize));
        id
    }

    /// Status of a request issued with [`Simulation::submit`], once finished.
    pub fn outcome(&self, request_id: u64) -> Option<(Status, u64)> {
        self.requests.get(request_id as usize).and_then(|r| r.outcome)
    }

    /// Starts one sync round from `from` to `to` now, outside the schedule.
    pub fn trigger_sync(&mut self, from: u64, to: u64) {
        self.enqueue(from, Job::Sync(to));
    }

    /// Applies an event now, whatever its `t_ms`.
    pub fn apply(&mut self, event: &EventSpec) {
        let affected: Vec<(u64, u64)> = self
            .links
            .keys()
            .copied()
            .filter(|(a, b)| {
                let isolated = |x: &u64| event.isolate.contains(x);
                let listed = event.links.iter().any(|[x, y]| (x, y) == (a, b) || (x, y) == (b, a));
                let everything = event.isolate.is_empty() && event.links.is_empty();
                everything || listed || isolated(a) != isolated(b)
            })
            .collect();
        for key in affected {
            let link = self.links.get_mut(&key).expect("listed above");
            match event.action {
                Action::Partition => link.partitioned = true,
                Action::Heal => link.partitioned = false,
                Action::SetLatency => {
                    let l = &self.scenario.link;
                    link.delay.set(
                        event.delay_ms.unwrap_or(l.delay_ms),
                        event.variation.unwrap_or(l.variation),
                        event.correlation.unwrap_or(l.correlation),
                    );
                }
            }
        }
        if event.action == Action::Heal {
            self.heals.push(HealRecord { at_us: self.now, converged_us: None });
            self.note_convergence();
        }
    }

    /// Processes every event scheduled at or before `t_us`.
    pub fn run_until(&mut self, t_us: u64) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > t_us {
                break;
            }
            let ((at, _), event) = entry.remove_entry();
            self.now = at;
            self.handle(event);
        }
        self.now = self.now.max(t_us);
    }

    pub fn run_to_end(&mut self) {
        self.run_until(self.end_us);
    }

    /// Ends the run; unfinished requests are recorded as timeouts.
    pub fn finish(mut self) -> RunReport {
        let now = self.now;
        for r in &mut self.requests {
            r.outcome.get_or_insert((Status::Timeout, now));
        }
        RunReport {
            metrics: self.metrics(),
            final_heads: self
                .servers
                .iter()
                .map(|s| (s.node.id(), s.node.heads().iter().map(|h| h.to_hex()).collect()))
                .collect(),
            changes_per_node: self.servers.iter().map(|s| (s.node.id(), s.node.doc().len())).collect(),
            converged: self.heads_equal(),
            heals: self.heals.clone(),
            messages_sent: self.messages.len(),
            messages_delivered: self.messages.iter().filter(|m| m.delivered_us.is_some()).count(),
            messages_dropped: self.messages.iter().filter(|m| m.dropped).count(),
            end_us: now,
        }
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Arrival(idx) => {
                let node = self.requests[idx].node;
                self.enqueue(node, Job::Request(idx));
            }
            Event::Deliver(id) => {
                let (to, msg) = self.in_flight.remove(&id).expect("scheduled once");
                let from = msg.from();
                let record = &mut self.messages[id as usize];
                if self.links[&(from, to)].partitioned {
                    record.dropped = true;
                } else {
                    record.delivered_us = Some(self.now);
                    self.enqueue(to, Job::Message(msg));
                }
            }
            Event::Tick { node, peer } => {
                self.enqueue(node, Job::Sync(peer));
                let interval = self.scenario.sync_interval_ms.expect("ticks only exist with an interval");
                self.schedule(self.now + interval * 1000, Event::Tick { node, peer });
            }
            Event::Done(node) => {
                let outputs = std::mem::take(&mut self.servers[node as usize - 1].pending);
                for out in outputs {
                    match out {
                        Output::Send(to, msg) => self.send(node, to, msg),
                        Output::Complete(idx, status) => self.requests[idx].outcome = Some((status, self.now)),
                    }
                }
                self.servers[node as usize - 1].busy = false;
                self.note_convergence();
                self.start(node);
            }
            Event::Control(i) => {
                let e = self.scenario.events[i].clone();
                self.apply(&e);
            }
        }
    }

    fn enqueue(&mut self, node: u64, job: Job) {
        self.servers[node as usize - 1].queue.push_back(job);
        self.start(node);
    }

    fn start(&mut self, node: u64) {
        let costs = self.scenario.costs.clone();
        let timeout_us = self.scenario.request_timeout_ms * 1000;
        let now = self.now;
        let server = &mut self.servers[node as usize - 1];
        if server.busy {
            return;
        }
        while let Some(job) = server.queue.pop_front() {
            let n = &mut server.node;
            let cost = match job {
                Job::Request(idx) => {
                    let r = &mut self.requests[idx];
                    if now - r.issue_us > timeout_us {
                        r.outcome = Some((Status::Timeout, now));
                        continue;
                    }
                    let ok = match r.req.op {
                        OpKind::Read => n.range(&KeyRange::exact(r.req.key.clone()), &ReadAt::Current, None).is_ok(),
                        OpKind::Update => n
                            .put(&PutArgs { key: r.req.key.clone(), value: r.req.value.clone(), lease: None, prev_kv: false })
                            .is_ok(),
                    };
                    server.pending.push(Output::Complete(idx, if ok { Status::Ok } else { Status::Error }));
                    costs.request_us
                }
                Job::Message(msg) => {
                    let from = msg.from();
                    let mut carried = msg.changes().len();
                    for reply in n.handle_peer_message(msg) {
                        carried += reply.changes().len();
                        server.pending.push(Output::Send(from, reply));
                    }
                    costs.message_us + costs.per_change_us * carried as u64
                }
                Job::Sync(peer) => {
                    if let Some(msg) = n.begin_sync(peer, now / 1000) {
                        server.pending.push(Output::Send(peer, msg));
                    }
                    costs.sync_tick_us
                }
            };
            for (to, msg) in n.take_outbox() {
                server.pending.push(Output::Send(to, msg));
            }
            n.take_watch_pushes();
            server.busy = true;
            self.schedule(now + cost, Event::Done(node));
            return;
        }
    }

    fn send(&mut self, from: u64, to: u64, msg: PeerMessage) {
        let id = self.messages.len() as u64;
        let link = self.links.get_mut(&(from, to)).expect("nodes only address topology neighbours");
        let mut record = MessageRecord {
            id,
            from,
            to,
            kind: kind(&msg),
            bytes: msg.to_line().len(),
            changes: msg.changes().iter().map(|c| c.hash()).collect(),
            sent_us: self.now,
            delivered_us: None,
            dropped: false,
        };
        if link.partitioned {
            record.dropped = true;
            self.messages.push(record);
            return;
        }
        let at = (self.now + link.delay.next_us()).max(link.last_delivery_us);
        link.last_delivery_us = at;
        self.messages.push(record);
        self.in_flight.insert(id, (to, msg));
        self.schedule(at, Event::Deliver(id));
    }

    fn note_convergence(&mut self) {
        if matches!(self.heals.last(), Some(h) if h.converged_us.is_none()) && self.heads_equal() {
            self.heals.last_mut().expect("checked").converged_us = Some(self.now);
        }
    }
}

/// Runs a scenario from start to the end of its quiescence window.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<RunReport, SimError> {
    let mut sim = Simulation::new(scenario, seed)?;
    sim.run_to_end();
    Ok(sim.finish())
}
