//! Deterministic cluster simulator: virtual clock, lossy jittered links,
//! open-loop load and latency reports.

pub mod delay;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod workload;

pub use metrics::{MetricRecord, Status};
pub use report::{summarize, Summary};
pub use runner::{run_scenario, HealRecord, MessageRecord, RunReport, Simulation};
pub use scenario::{Action, Costs, EventSpec, LinkSpec, Scenario, TopologySpec};
pub use workload::{OpKind, Workload, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Node(#[from] causal_kv_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
