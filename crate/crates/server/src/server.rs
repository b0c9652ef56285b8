//! TCP front end. One engine thread owns the node; connections, peer links,
//! the sync scheduler and lease expiry reach it only through its queue.
//! Clients and peers share the listen port; a line with "type" and no "op"
//! is peer traffic.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use causal_kv_core::api::{classify, handle_request, Frame};
use causal_kv_core::durability::FsyncPolicy;
use causal_kv_core::watch::MAX_PENDING_EVENTS;
use causal_kv_core::{Node, NodeConfig, PeerMessage, RevisionMode, ValueSchema};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

const ENGINE_QUEUE: usize = 4096;
/// Per-peer backlog of unsent messages; beyond it messages are dropped and
/// left to periodic sync.
const PEER_QUEUE: usize = 10_000;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const LEASE_CHECK: Duration = Duration::from_millis(250);

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub node_id: u64,
    pub mode: RevisionMode,
    pub schema: ValueSchema,
    pub peers: Vec<(u64, String)>,
    pub data_dir: Option<PathBuf>,
    /// `None` disables periodic sync.
    pub sync_interval: Option<Duration>,
    pub fsync: FsyncPolicy,
}

impl ServeConfig {
    pub fn new(node_id: u64, mode: RevisionMode, schema: ValueSchema) -> Self {
        ServeConfig {
            node_id,
            mode,
            schema,
            peers: Vec::new(),
            data_dir: None,
            sync_interval: Some(Duration::from_millis(100)),
            fsync: FsyncPolicy::PerChange,
        }
    }
}

enum Line {
    Text(String),
    /// A watch push counted against the connection's backlog.
    Push(String, usize),
    /// Last line before the server closes the connection.
    Close(String),
}

#[derive(Clone)]
struct Outbound {
    conn: u64,
    tx: mpsc::UnboundedSender<Line>,
    /// Watch events queued but not yet written to the socket.
    pending_events: Arc<AtomicUsize>,
}

impl Outbound {
    fn send(&self, line: Line) {
        // A closed receiver means the connection is already gone.
        let _ = self.tx.send(line);
    }
}

enum ReplyTo {
    Conn(Outbound),
    Peer(u64),
}

enum EngineMsg {
    Client { request: Value, out: Outbound },
    Peer { msg: PeerMessage, reply: ReplyTo },
    Tick(u64),
    ExpireLeases,
    Closed(u64),
}

struct Engine {
    node: Node,
    started: Instant,
    watch_owners: BTreeMap<u64, Outbound>,
    peers: BTreeMap<u64, mpsc::Sender<PeerMessage>>,
}

impl Engine {
    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn handle(&mut self, msg: EngineMsg) {
        match msg {
            EngineMsg::Client { request, out } => {
                let now = self.now_ms();
                let handled = handle_request(&mut self.node, &request, now);
                out.send(Line::Text(handled.response.to_string()));
                if let Some(id) = handled.watch_created {
                    self.watch_owners.insert(id, out.clone());
                }
                if let Some(id) = handled.watch_cancelled {
                    self.watch_owners.remove(&id);
                }
            }
            EngineMsg::Peer { msg, reply } => {
                for r in self.node.handle_peer_message(msg) {
                    match &reply {
                        ReplyTo::Conn(out) => out.send(Line::Text(r.to_line())),
                        ReplyTo::Peer(id) => self.to_peer(*id, r),
                    }
                }
            }
            EngineMsg::Tick(peer) => {
                let now = self.now_ms();
                if let Some(req) = self.node.begin_sync(peer, now) {
                    self.to_peer(peer, req);
                }
            }
            EngineMsg::ExpireLeases => {
                let now = self.now_ms();
                for id in self.node.expire_leases(now) {
                    log::info!("lease {id} expired");
                }
            }
            EngineMsg::Closed(conn) => self.drop_watches_of(conn),
        }
        self.flush();
    }

    fn drop_watches_of(&mut self, conn: u64) {
        let ids: Vec<u64> = self.watch_owners.iter().filter(|(_, o)| o.conn == conn).map(|(id, _)| *id).collect();
        for id in ids {
            self.watch_owners.remove(&id);
            let _ = self.node.watch_cancel(id);
        }
    }

    fn to_peer(&self, peer: u64, msg: PeerMessage) {
        if let Some(tx) = self.peers.get(&peer) {
            if tx.try_send(msg).is_err() {
                log::debug!("peer {peer} backlog full; message dropped");
            }
        }
    }

    /// Routes watch pushes to their connections and queued broadcasts to peers.
    fn flush(&mut self) {
        for push in self.node.take_watch_pushes() {
            let Some(out) = self.watch_owners.get(&push.watch_id).cloned() else { continue };
            let n = push.events.len();
            if out.pending_events.load(Ordering::Acquire) + n > MAX_PENDING_EVENTS {
                log::warn!("connection {} fell {MAX_PENDING_EVENTS} watch events behind; closing", out.conn);
                let err = json!({
                    "watch_id": push.watch_id,
                    "error": {"code": "watch_overflow", "msg": format!("more than {MAX_PENDING_EVENTS} undelivered watch events")},
                });
                out.send(Line::Close(err.to_string()));
                self.drop_watches_of(out.conn);
                continue;
            }
            out.pending_events.fetch_add(n, Ordering::AcqRel);
            out.send(Line::Push(push.to_json().to_string(), n));
        }
        for (peer, msg) in self.node.take_outbox() {
            self.to_peer(peer, msg);
        }
    }
}

/// A running server; dropping it stops accepting and stops its timers.
pub struct Server {
    addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Resolves when the accept loop ends.
    pub async fn wait(mut self) {
        if let Some(accept) = self.tasks.first_mut() {
            let _ = accept.await;
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

pub async fn start(listen: &str, config: ServeConfig) -> anyhow::Result<Server> {
    let listener = TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
    start_on(listener, config)
}

/// Starts on an already bound listener, so peers can learn each other's
/// addresses before either starts.
pub fn start_on(listener: TcpListener, config: ServeConfig) -> anyhow::Result<Server> {
    let addr = listener.local_addr()?;
    let url = addr.to_string();
    let node_config = NodeConfig {
        peers: config.peers.iter().map(|(id, a)| (*id, Some(a.clone()))).collect(),
        peer_urls: vec![url.clone()],
        client_urls: vec![url],
        ..NodeConfig::new(config.node_id, config.mode, config.schema)
    };
    let node = match &config.data_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Node::open(node_config, dir, config.fsync)?
        }
        None => Node::new(node_config)?,
    };

    let (engine_tx, mut engine_rx) = mpsc::channel::<EngineMsg>(ENGINE_QUEUE);
    let mut tasks = Vec::new();
    let mut peers = BTreeMap::new();
    let mut links = Vec::new();
    for (id, peer_addr) in &config.peers {
        let (tx, rx) = mpsc::channel(PEER_QUEUE);
        peers.insert(*id, tx);
        links.push(tokio::spawn(peer_link(*id, peer_addr.clone(), rx, engine_tx.clone())));
    }

    let mut engine = Engine { node, started: Instant::now(), watch_owners: BTreeMap::new(), peers };
    std::thread::Builder::new().name(format!("engine-{}", config.node_id)).spawn(move || {
        while let Some(msg) = engine_rx.blocking_recv() {
            engine.handle(msg);
        }
    })?;

    tasks.push(tokio::spawn(accept_loop(listener, engine_tx.clone())));
    tasks.extend(links);
    if let Some(interval) = config.sync_interval {
        let n = config.peers.len() as u32;
        for (i, (id, _)) in config.peers.iter().enumerate() {
            let tx = engine_tx.clone();
            let (id, offset) = (*id, interval * i as u32 / n.max(1));
            tasks.push(tokio::spawn(async move {
                tokio::time::sleep(offset).await;
                let mut ticks = tokio::time::interval(interval);
                ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    ticks.tick().await;
                    if tx.send(EngineMsg::Tick(id)).await.is_err() {
                        return;
                    }
                }
            }));
        }
    }
    tasks.push(tokio::spawn(async move {
        let mut ticks = tokio::time::interval(LEASE_CHECK);
        loop {
            ticks.tick().await;
            if engine_tx.send(EngineMsg::ExpireLeases).await.is_err() {
                return;
            }
        }
    }));
    log::info!("node {} listening on {addr}", config.node_id);
    Ok(Server { addr, tasks })
}

async fn accept_loop(listener: TcpListener, engine: mpsc::Sender<EngineMsg>) {
    let mut next_conn = 0u64;
    loop {
        match listener.accept().await {
            Ok((stream, remote)) => {
                next_conn += 1;
                log::debug!("connection {next_conn} from {remote}");
                let _ = stream.set_nodelay(true);
                tokio::spawn(connection(stream, next_conn, engine.clone()));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

async fn connection(stream: TcpStream, conn: u64, engine: mpsc::Sender<EngineMsg>) {
    let (read, write) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    let out = Outbound { conn, tx, pending_events: Arc::new(AtomicUsize::new(0)) };
    let closed = Arc::new(Notify::new());
    tokio::spawn(writer(write, rx, out.pending_events.clone(), closed.clone()));

    let mut lines = BufReader::new(read).lines();
    loop {
        let line = tokio::select! {
            line = lines.next_line() => line,
            _ = closed.notified() => break,
        };
        let line = match line {
            Ok(Some(line)) => line,
            Ok(None) => break,
            Err(e) => {
                log::debug!("connection {conn}: {e}");
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let msg = match classify(&line) {
            Frame::Request(request) => EngineMsg::Client { request, out: out.clone() },
            Frame::Peer(msg) => EngineMsg::Peer { msg, reply: ReplyTo::Conn(out.clone()) },
            Frame::Garbage(why) => {
                log::debug!("connection {conn}: closing on unparseable frame: {why}");
                let err = json!({"id": null, "ok": false, "error": {"code": "malformed", "msg": why}});
                out.send(Line::Close(err.to_string()));
                break;
            }
        };
        if engine.send(msg).await.is_err() {
            break;
        }
    }
    let _ = engine.send(EngineMsg::Closed(conn)).await;
}

async fn writer(
    mut write: OwnedWriteHalf,
    mut rx: mpsc::UnboundedReceiver<Line>,
    pending_events: Arc<AtomicUsize>,
    closed: Arc<Notify>,
) {
    while let Some(line) = rx.recv().await {
        let (text, events, last) = match line {
            Line::Text(t) => (t, 0, false),
            Line::Push(t, n) => (t, n, false),
            Line::Close(t) => (t, 0, true),
        };
        let mut bytes = text.into_bytes();
        bytes.push(b'\n');
        if write.write_all(&bytes).await.is_err() {
            break;
        }
        pending_events.fetch_sub(events, Ordering::AcqRel);
        if last {
            break;
        }
    }
    let _ = write.shutdown().await;
    closed.notify_one();
}

/// Outbound messages to one peer. The connection is opened on demand and
/// dropped on any error; sends are fire-and-forget.
async fn peer_link(id: u64, addr: String, mut rx: mpsc::Receiver<PeerMessage>, engine: mpsc::Sender<EngineMsg>) {
    let mut conn: Option<(OwnedWriteHalf, Arc<AtomicBool>)> = None;
    while let Some(msg) = rx.recv().await {
        if conn.as_ref().is_some_and(|(_, dead)| dead.load(Ordering::Acquire)) {
            conn = None;
        }
        if conn.is_none() {
            match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(&addr)).await {
                Ok(Ok(stream)) => {
                    let _ = stream.set_nodelay(true);
                    let (read, write) = stream.into_split();
                    let dead = Arc::new(AtomicBool::new(false));
                    tokio::spawn(peer_replies(id, read, engine.clone(), dead.clone()));
                    conn = Some((write, dead));
                }
                _ => {
                    log::debug!("peer {id} at {addr} unreachable; dropping {:?}", std::mem::discriminant(&msg));
                    continue;
                }
            }
        }
        let (write, _) = conn.as_mut().expect("connected above");
        let mut bytes = msg.to_line().into_bytes();
        bytes.push(b'\n');
        if let Err(e) = write.write_all(&bytes).await {
            log::debug!("peer {id}: {e}");
            conn = None;
        }
    }
}

async fn peer_replies(id: u64, read: OwnedReadHalf, engine: mpsc::Sender<EngineMsg>, dead: Arc<AtomicBool>) {
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        match PeerMessage::from_line(&line) {
            Ok(msg) => {
                if engine.send(EngineMsg::Peer { msg, reply: ReplyTo::Peer(id) }).await.is_err() {
                    break;
                }
            }
            Err(e) => {
                log::warn!("peer {id} sent an unreadable message: {e}");
                break;
            }
        }
    }
    dead.store(true, Ordering::Release);
}
