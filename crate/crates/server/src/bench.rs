//! Open-loop load over a live connection: requests leave on a fixed
//! schedule whether or not earlier ones have been answered.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use causal_kv_sim::workload::{OpKind, Workload, WorkloadSpec};
use causal_kv_sim::{MetricRecord, Status};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub target: String,
    pub workload: WorkloadSpec,
    pub seed: u64,
    /// How long to wait for stragglers after the last request.
    pub drain: Duration,
}

struct InFlight {
    op: OpKind,
    issue_us: u64,
}

fn request_line(id: u64, op: OpKind, key: &[u8], value: &[u8]) -> String {
    let v = match op {
        OpKind::Read => json!({"id": id, "op": "range", "key": STANDARD.encode(key)}),
        OpKind::Update => json!({"id": id, "op": "put", "key": STANDARD.encode(key), "value": STANDARD.encode(value)}),
    };
    let mut line = v.to_string();
    line.push('\n');
    line
}

pub async fn run(config: &BenchConfig) -> anyhow::Result<Vec<MetricRecord>> {
    let stream = TcpStream::connect(&config.target).await.with_context(|| format!("connecting to {}", config.target))?;
    stream.set_nodelay(true)?;
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();

    write.write_all(b"{\"id\":0,\"op\":\"status\"}\n").await?;
    let status: Value = match lines.next_line().await? {
        Some(l) => serde_json::from_str(&l)?,
        None => bail!("server closed the connection before answering status"),
    };
    let node = status["header"]["member_id"].as_u64().context("status response lacks header.member_id")?;

    let start = Instant::now();
    let elapsed_us = move || start.elapsed().as_micros() as u64;
    let pending: Arc<Mutex<HashMap<u64, InFlight>>> = Arc::default();
    let done: Arc<Mutex<Vec<MetricRecord>>> = Arc::default();

    let reader = {
        let (pending, done) = (pending.clone(), done.clone());
        tokio::spawn(async move {
            while let Ok(Some(line)) = lines.next_line().await {
                let Ok(v) = serde_json::from_str::<Value>(&line) else { continue };
                // Watch pushes carry no request id.
                let Some(id) = v.get("id").and_then(Value::as_u64) else { continue };
                let Some(f) = pending.lock().unwrap().remove(&id) else { continue };
                let status = if v["ok"].as_bool() == Some(true) { Status::Ok } else { Status::Error };
                done.lock().unwrap().push(MetricRecord {
                    request_id: id,
                    op: f.op.as_str().into(),
                    issue_us: f.issue_us,
                    complete_us: elapsed_us(),
                    status,
                    node,
                });
            }
        })
    };

    for req in Workload::new(config.workload.clone(), config.seed) {
        tokio::time::sleep_until((start + Duration::from_micros(req.at_us)).into()).await;
        let id = req.id + 1;
        pending.lock().unwrap().insert(id, InFlight { op: req.op, issue_us: elapsed_us() });
        write.write_all(request_line(id, req.op, &req.key, &req.value).as_bytes()).await?;
    }

    let deadline = Instant::now() + config.drain;
    while Instant::now() < deadline && !pending.lock().unwrap().is_empty() {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    reader.abort();
    let now = elapsed_us();
    let mut records = std::mem::take(&mut *done.lock().unwrap());
    for (id, f) in pending.lock().unwrap().drain() {
        records.push(MetricRecord {
            request_id: id,
            op: f.op.as_str().into(),
            issue_us: f.issue_us,
            complete_us: now,
            status: Status::Timeout,
            node,
        });
    }
    records.sort_by_key(|r| r.request_id);
    Ok(records)
}
