//! One CSV row per issued request, failures included.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SimError;

pub const HEADER: &str = "request_id,op,issue_us,complete_us,status,node";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub request_id: u64,
    pub op: String,
    pub issue_us: u64,
    pub complete_us: u64,
    pub status: Status,
    pub node: u64,
}

impl MetricRecord {
    pub fn latency_us(&self) -> u64 {
        self.complete_us.saturating_sub(self.issue_us)
    }
}

pub fn write_csv<W: io::Write>(out: W, records: &[MetricRecord]) -> Result<(), SimError> {
    // The header is written explicitly so an empty run still has one.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_file(path: &Path, records: &[MetricRecord]) -> Result<(), SimError> {
    write_csv(io::BufWriter::new(std::fs::File::create(path)?), records)
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<MetricRecord>, SimError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != HEADER {
        return Err(SimError::Scenario(format!("metrics header {:?} is not {HEADER:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(SimError::from)).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<MetricRecord>, SimError> {
    read_csv(std::fs::File::open(path)?)
}
