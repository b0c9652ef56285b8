//! Latency summaries over metrics. Percentiles use the nearest-rank rule on
//! successful requests; failures are counted separately.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::metrics::{MetricRecord, Status};

/// Nearest rank: the smallest sample with at least `p`% of samples at or
/// below it. `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Percentiles {
    pub p1_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

impl Percentiles {
    fn of(latencies_us: &mut [u64]) -> Option<Self> {
        if latencies_us.is_empty() {
            return None;
        }
        latencies_us.sort_unstable();
        let ms = |p| nearest_rank(latencies_us, p) as f64 / 1000.0;
        Some(Percentiles { p1_ms: ms(1.0), p50_ms: ms(50.0), p99_ms: ms(99.0) })
    }
}

/// Requests completed within one second of simulated or wall time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Window {
    pub second: u64,
    pub completed: usize,
    pub ok: usize,
    pub failed: usize,
    pub latency: Option<Percentiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub total: usize,
    pub ok: usize,
    pub errors: usize,
    pub timeouts: usize,
    pub success_fraction: f64,
    /// Completions per second over first issue to last completion.
    pub achieved_rate: f64,
    pub latency: Option<Percentiles>,
    pub windows: Vec<Window>,
}

pub fn summarize(records: &[MetricRecord]) -> Summary {
    let count = |s| records.iter().filter(|r| r.status == s).count();
    let ok = count(Status::Ok);
    let mut all: Vec<u64> = records.iter().filter(|r| r.status == Status::Ok).map(MetricRecord::latency_us).collect();
    let span_us = match (records.iter().map(|r| r.issue_us).min(), records.iter().map(|r| r.complete_us).max()) {
        (Some(a), Some(b)) if b > a => (b - a) as f64,
        _ => 0.0,
    };

    let mut by_second: BTreeMap<u64, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_second.entry(r.complete_us / 1_000_000).or_default().push(r);
    }
    let windows = by_second
        .into_iter()
        .map(|(second, rs)| {
            let mut lat: Vec<u64> = rs.iter().filter(|r| r.status == Status::Ok).map(|r| r.latency_us()).collect();
            let ok = lat.len();
            Window { second, completed: rs.len(), ok, failed: rs.len() - ok, latency: Percentiles::of(&mut lat) }
        })
        .collect();

    Summary {
        total: records.len(),
        ok,
        errors: count(Status::Error),
        timeouts: count(Status::Timeout),
        success_fraction: if records.is_empty() { 1.0 } else { ok as f64 / records.len() as f64 },
        achieved_rate: if span_us > 0.0 { records.len() as f64 / (span_us / 1e6) } else { 0.0 },
        latency: Percentiles::of(&mut all),
        windows,
    }
}

impl Summary {
    /// Per-window CSV followed by an overall line, for plotting.
    pub fn to_table(&self) -> String {
        let mut out = String::from("window_s,completed,ok,failed,achieved_rate,p1_ms,p50_ms,p99_ms\n");
        let cols = |p: &Option<Percentiles>| match p {
            Some(p) => format!("{:.3},{:.3},{:.3}", p.p1_ms, p.p50_ms, p.p99_ms),
            None => ",,".to_string(),
        };
        for w in &self.windows {
            let _ = writeln!(out, "{},{},{},{},{},{}", w.second, w.completed, w.ok, w.failed, w.completed, cols(&w.latency));
        }
        let _ = writeln!(
            out,
            "all,{},{},{},{:.1},{}",
            self.total,
            self.ok,
            self.errors + self.timeouts,
            self.achieved_rate,
            cols(&self.latency)
        );
        let _ = writeln!(
            out,
            "# success_fraction={:.6} errors={} timeouts={}",
            self.success_fraction, self.errors, self.timeouts
        );
        out
    }
}
