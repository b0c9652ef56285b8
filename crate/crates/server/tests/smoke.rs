//! Loopback tests against the real TCP service.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use causal_kv::bench::{self, BenchConfig};
use causal_kv::server::{self, ServeConfig, Server};
use causal_kv_core::durability::FsyncPolicy;
use causal_kv_core::{Document, RevisionMode, ValueSchema};
use causal_kv_sim::{Status, WorkloadSpec};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::timeout;

struct Client {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl Client {
    async fn connect(server: &Server) -> Client {
        let (read, write) = TcpStream::connect(server.local_addr()).await.unwrap().into_split();
        Client { lines: BufReader::new(read).lines(), write }
    }

    async fn send(&mut self, v: Value) {
        self.send_raw(&v.to_string()).await;
    }

    async fn send_raw(&mut self, line: &str) {
        self.write.write_all(format!("{line}\n").as_bytes()).await.unwrap();
    }

    async fn recv(&mut self) -> Option<Value> {
        let line = timeout(Duration::from_secs(5), self.lines.next_line()).await.expect("no reply in 5 s").ok()??;
        Some(serde_json::from_str(&line).unwrap())
    }

    async fn call(&mut self, v: Value) -> Value {
        self.send(v).await;
        self.recv().await.expect("connection closed")
    }
}

fn b64(s: &str) -> String {
    STANDARD.encode(s)
}

fn config(id: u64, mode: RevisionMode) -> ServeConfig {
    ServeConfig { fsync: FsyncPolicy::Never, ..ServeConfig::new(id, mode, ValueSchema::Bytes) }
}

async fn single(mode: RevisionMode) -> Server {
    server::start("127.0.0.1:0", config(1, mode)).await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn fresh_node_reports_genesis_position() {
    let counter = single(RevisionMode::Counter).await;
    let mut c = Client::connect(&counter).await;
    let r = c.call(json!({"id": 1, "op": "status"})).await;
    assert_eq!((r["ok"].as_bool(), r["header"]["revision"].as_u64(), r["header"]["member_id"].as_u64()), (Some(true), Some(1), Some(1)));

    let hash = single(RevisionMode::Hash).await;
    let mut c = Client::connect(&hash).await;
    let r = c.call(json!({"id": 2, "op": "status"})).await;
    let genesis = Document::new(RevisionMode::Hash).genesis_hash().to_hex();
    assert_eq!(r["header"]["heads"], json!([genesis]));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_op_is_an_error_and_the_connection_survives() {
    let s = single(RevisionMode::Counter).await;
    let mut c = Client::connect(&s).await;
    let r = c.call(json!({"id": 9, "op": "frobnicate"})).await;
    assert_eq!((r["id"].as_u64(), r["ok"].as_bool()), (Some(9), Some(false)));
    assert_eq!(r["error"]["code"], "malformed");
    let r = c.call(json!({"id": 10, "op": "range", "key": b64("missing")})).await;
    assert_eq!((r["ok"].as_bool(), r["count"].as_u64()), (Some(true), Some(0)));
}

#[tokio::test(flavor = "multi_thread")]
async fn garbage_closes_the_connection() {
    let s = single(RevisionMode::Hash).await;
    let mut c = Client::connect(&s).await;
    c.send_raw("this is not json").await;
    let last = c.recv().await.unwrap();
    assert_eq!(last["error"]["code"], "malformed");
    assert!(c.recv().await.is_none());
}

#[tokio::test(flavor = "multi_thread")]
async fn pipelined_puts_get_increasing_revisions_in_order() {
    let s = single(RevisionMode::Counter).await;
    let mut c = Client::connect(&s).await;
    for i in 0..100u64 {
        c.send(json!({"id": i, "op": "put", "key": b64(&format!("k{}", i % 10)), "value": b64("v")})).await;
    }
    let mut last = 0;
    for i in 0..100u64 {
        let r = c.recv().await.unwrap();
        assert_eq!(r["id"].as_u64(), Some(i));
        let rev = r["header"]["revision"].as_u64().unwrap();
        assert!(rev > last, "{rev} after {last}");
        last = rev;
    }
    assert_eq!(last, 101);
}

#[tokio::test(flavor = "multi_thread")]
async fn watch_pushes_follow_puts_until_cancelled() {
    let s = single(RevisionMode::Counter).await;
    let mut watcher = Client::connect(&s).await;
    let mut writer = Client::connect(&s).await;
    let r = watcher.call(json!({"id": 1, "op": "watch_create", "key": b64("a")})).await;
    let wid = r["watch_id"].as_u64().unwrap();
    writer.call(json!({"id": 1, "op": "put", "key": b64("a"), "value": b64("1")})).await;
    writer.call(json!({"id": 2, "op": "put", "key": b64("b"), "value": b64("1")})).await;
    let push = watcher.recv().await.unwrap();
    assert_eq!(push["watch_id"].as_u64(), Some(wid));
    assert_eq!(push["events"][0]["type"], "put");
    assert_eq!(push["events"][0]["value"], b64("1"));
    assert_eq!(push["events"][0]["mod_revision"].as_u64(), Some(2));
    let r = watcher.call(json!({"id": 2, "op": "watch_cancel", "watch_id": wid})).await;
    assert_eq!(r["canceled"], true);
    writer.call(json!({"id": 3, "op": "put", "key": b64("a"), "value": b64("2")})).await;
    let r = watcher.call(json!({"id": 3, "op": "status"})).await;
    assert_eq!(r["id"].as_u64(), Some(3), "no push may arrive after cancel");
}

async fn pair(mode: RevisionMode, sync_ms: Option<u64>) -> (Server, Server) {
    let l1 = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let l2 = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (a1, a2) = (l1.local_addr().unwrap().to_string(), l2.local_addr().unwrap().to_string());
    let interval = sync_ms.map(Duration::from_millis);
    let c1 = ServeConfig { peers: vec![(2, a2)], sync_interval: interval, ..config(1, mode) };
    let c2 = ServeConfig { peers: vec![(1, a1)], sync_interval: interval, ..config(2, mode) };
    (server::start_on(l1, c1).unwrap(), server::start_on(l2, c2).unwrap())
}

async fn wait_for<F: FnMut(&Value) -> bool>(c: &mut Client, req: Value, mut ok: F) -> Value {
    for _ in 0..100 {
        let r = c.call(req.clone()).await;
        if ok(&r) {
            return r;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("condition not reached for {req}");
}

#[tokio::test(flavor = "multi_thread")]
async fn two_nodes_replicate_and_report_status() {
    let (n1, n2) = pair(RevisionMode::Hash, Some(50)).await;
    let mut c1 = Client::connect(&n1).await;
    let mut c2 = Client::connect(&n2).await;
    let put = c1.call(json!({"id": 1, "op": "put", "key": b64("k"), "value": b64("v")})).await;
    let heads = put["header"]["heads"].clone();
    let got = wait_for(&mut c2, json!({"id": 1, "op": "range", "key": b64("k")}), |r| r["count"] == 1).await;
    assert_eq!(got["kvs"][0]["value"], b64("v"));
    wait_for(&mut c1, json!({"id": 2, "op": "replication_status", "heads": heads}), |r| r["peers"]["2"] == true).await;
    // A node joins the member list with its first write.
    c2.call(json!({"id": 2, "op": "put", "key": b64("k2"), "value": b64("w")})).await;
    let members = wait_for(&mut c1, json!({"id": 3, "op": "member_list"}), |r| r["members"].as_array().is_some_and(|m| m.len() == 2)).await;
    assert_eq!(members["ok"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn periodic_sync_repairs_what_broadcast_missed() {
    // Node 2 starts late, so node 1's broadcast has nowhere to go.
    let l2 = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let a2 = l2.local_addr().unwrap().to_string();
    drop(l2);
    let n1 = server::start(
        "127.0.0.1:0",
        ServeConfig { peers: vec![(2, a2.clone())], sync_interval: Some(Duration::from_millis(50)), ..config(1, RevisionMode::Counter) },
    )
    .await
    .unwrap();
    let mut c1 = Client::connect(&n1).await;
    c1.call(json!({"id": 1, "op": "put", "key": b64("late"), "value": b64("x")})).await;
    let a1 = n1.local_addr().to_string();
    let n2 = server::start(&a2, ServeConfig { peers: vec![(1, a1)], sync_interval: None, ..config(2, RevisionMode::Counter) })
        .await
        .unwrap();
    let mut c2 = Client::connect(&n2).await;
    let r = wait_for(&mut c2, json!({"id": 1, "op": "range", "key": b64("late")}), |r| r["count"] == 1).await;
    assert_eq!(r["kvs"][0]["mod_revision"].as_u64(), Some(2));
}

#[tokio::test(flavor = "multi_thread")]
async fn data_dir_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServeConfig { data_dir: Some(dir.path().join("node1")), ..config(1, RevisionMode::Counter) };
    let before = {
        let s = server::start("127.0.0.1:0", cfg.clone()).await.unwrap();
        let mut c = Client::connect(&s).await;
        for i in 0..5 {
            c.call(json!({"id": i, "op": "put", "key": b64("k"), "value": b64(&i.to_string())})).await;
        }
        c.call(json!({"id": 9, "op": "range", "key": b64("k")})).await
    };
    let s = server::start("127.0.0.1:0", cfg).await.unwrap();
    let mut c = Client::connect(&s).await;
    let after = c.call(json!({"id": 9, "op": "range", "key": b64("k")})).await;
    assert_eq!(after["kvs"], before["kvs"]);
    assert_eq!(after["header"]["revision"].as_u64(), Some(6));
}

#[tokio::test(flavor = "multi_thread")]
async fn bench_records_every_request() {
    let s = single(RevisionMode::Hash).await;
    let cfg = BenchConfig {
        target: s.local_addr().to_string(),
        workload: WorkloadSpec { key_count: 20, ..WorkloadSpec::ycsb_a(200.0, 1.0) },
        seed: 3,
        drain: Duration::from_secs(5),
    };
    let records = bench::run(&cfg).await.unwrap();
    assert_eq!(records.len(), 200);
    assert!(records.iter().all(|r| r.status == Status::Ok && r.node == 1 && r.complete_us >= r.issue_us));
    assert!(records.windows(2).all(|w| w[0].request_id < w[1].request_id));
}
