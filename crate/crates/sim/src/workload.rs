//! Open-loop YCSB-A style load: fixed-interval arrivals, reads and updates
//! drawn with equal probability by default, keys uniform over a fixed set.

use rand::distributions::Alphanumeric;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Requests per second.
    pub rate: f64,
    pub duration_s: f64,
    #[serde(default = "default_read_fraction")]
    pub read_fraction: f64,
    #[serde(default = "default_key_count")]
    pub key_count: usize,
    #[serde(default = "default_key_size")]
    pub key_size: usize,
    #[serde(default = "default_value_size")]
    pub value_size: usize,
}

fn default_read_fraction() -> f64 {
    0.5
}

fn default_key_count() -> usize {
    1000
}

fn default_key_size() -> usize {
    18
}

fn default_value_size() -> usize {
    32
}

impl WorkloadSpec {
    pub fn ycsb_a(rate: f64, duration_s: f64) -> Self {
        WorkloadSpec {
            rate,
            duration_s,
            read_fraction: default_read_fraction(),
            key_count: default_key_count(),
            key_size: default_key_size(),
            value_size: default_value_size(),
        }
    }

    /// Number of arrivals: one every `1 / rate` seconds in `[0, duration)`.
    pub fn request_count(&self) -> u64 {
        (self.rate * self.duration_s).round() as u64
    }

    pub fn interval_us(&self) -> f64 {
        1e6 / self.rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Update,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Update => "update",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadRequest {
    pub id: u64,
    pub at_us: u64,
    pub op: OpKind,
    pub key: Vec<u8>,
    /// Empty for reads.
    pub value: Vec<u8>,
}

/// Deterministic request stream for a spec and seed.
pub struct Workload {
    spec: WorkloadSpec,
    keys: Vec<Vec<u8>>,
    rng: ChaCha8Rng,
    next: u64,
}

/// `key_count` distinct keys of exactly `key_size` bytes.
pub fn make_keys(count: usize, size: usize) -> Vec<Vec<u8>> {
    (0..count)
        .map(|i| {
            let digits = format!("{i}");
            let mut key = b"user".to_vec();
            key.resize(size.saturating_sub(digits.len()), b'0');
            key.extend_from_slice(digits.as_bytes());
            key.truncate(size.max(digits.len()));
            key
        })
        .collect()
}

impl Workload {
    pub fn new(spec: WorkloadSpec, seed: u64) -> Self {
        let keys = make_keys(spec.key_count.max(1), spec.key_size);
        Workload { spec, keys, rng: ChaCha8Rng::seed_from_u64(seed), next: 0 }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }
}

impl Iterator for Workload {
    type Item = WorkloadRequest;

    fn next(&mut self) -> Option<WorkloadRequest> {
        if self.next >= self.spec.request_count() {
            return None;
        }
        let id = self.next;
        self.next += 1;
        let at_us = (id as f64 * self.spec.interval_us()).round() as u64;
        let op = if self.rng.gen_bool(self.spec.read_fraction.clamp(0.0, 1.0)) {
            OpKind::Read
        } else {
            OpKind::Update
        };
        let key = self.keys[self.rng.gen_range(0..self.keys.len())].clone();
        let value = match op {
            OpKind::Read => Vec::new(),
            OpKind::Update => (&mut self.rng).sample_iter(Alphanumeric).take(self.spec.value_size).collect(),
        };
        Some(WorkloadRequest { id, at_us, op, key, value })
    }
}
