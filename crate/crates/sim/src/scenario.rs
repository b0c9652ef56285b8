//! Scenario files. Node ids are 1-based everywhere in this format.

use std::path::Path;

use causal_kv_core::{RevisionMode, Topology, ValueSchema};
use serde::{Deserialize, Serialize};

use crate::workload::WorkloadSpec;
use crate::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    /// "mesh" or "chain".
    Named(String),
    Edges(Vec<[u64; 2]>),
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Named("mesh".into())
    }
}

impl TopologySpec {
    pub fn build(&self, nodes: usize) -> Result<Topology, SimError> {
        match self {
            TopologySpec::Named(name) if name == "mesh" => Ok(Topology::mesh(nodes)),
            TopologySpec::Named(name) if name == "chain" => Ok(Topology::chain(nodes)),
            TopologySpec::Named(name) => Err(SimError::Scenario(format!("unknown topology {name:?}"))),
            TopologySpec::Edges(edges) => {
                if let Some([a, b]) = edges.iter().find(|[a, b]| *a == 0 || *b == 0) {
                    return Err(SimError::Scenario(format!("edge {a}-{b}: node ids start at 1")));
                }
                let edges: Vec<(u64, u64)> = edges.iter().map(|[a, b]| (a - 1, b - 1)).collect();
                Topology::from_edges(nodes, &edges).map_err(|e| SimError::Scenario(e.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub delay_ms: f64,
    #[serde(default)]
    pub variation: f64,
    #[serde(default)]
    pub correlation: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec { delay_ms: 10.0, variation: 0.1, correlation: 0.25 }
    }
}

/// Modeled service times in microseconds of simulated time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub request_us: u64,
    pub message_us: u64,
    /// Added per change received or sent while handling a message.
    pub per_change_us: u64,
    pub sync_tick_us: u64,
}

impl Default for Costs {
    fn default() -> Self {
        Costs { request_us: 50, message_us: 5, per_change_us: 2, sync_tick_us: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Partition,
    Heal,
    SetLatency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub t_ms: u64,
    pub action: Action,
    /// Cuts every link between these nodes and the rest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub isolate: Vec<u64>,
    /// Explicit links, both directions. Empty with no `isolate` means all links.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
}

impl EventSpec {
    pub fn partition(t_ms: u64, isolate: Vec<u64>) -> Self {
        EventSpec { isolate, ..EventSpec::bare(t_ms, Action::Partition) }
    }

    pub fn heal(t_ms: u64) -> Self {
        EventSpec::bare(t_ms, Action::Heal)
    }

    pub fn set_latency(t_ms: u64, delay_ms: f64) -> Self {
        EventSpec { delay_ms: Some(delay_ms), ..EventSpec::bare(t_ms, Action::SetLatency) }
    }

    fn bare(t_ms: u64, action: Action) -> Self {
        EventSpec { t_ms, action, isolate: Vec::new(), links: Vec::new(), delay_ms: None, variation: None, correlation: None }
    }
}

fn default_interval() -> Option<u64> {
    Some(100)
}

fn default_quiescence() -> u64 {
    2000
}

fn default_serving() -> u64 {
    1
}

fn default_timeout() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub nodes: usize,
    pub mode: RevisionMode,
    pub schema: ValueSchema,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub link: LinkSpec,
    /// `null` turns periodic sync off.
    #[serde(default = "default_interval")]
    pub sync_interval_ms: Option<u64>,
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    /// Idle time simulated after the last request and event.
    #[serde(default = "default_quiescence")]
    pub quiescence_ms: u64,
    #[serde(default = "default_serving")]
    pub serving_node: u64,
    /// Requests still queued this long after issue fail with `timeout`.
    #[serde(default = "default_timeout")]
    pub request_timeout_ms: u64,
    #[serde(default)]
    pub costs: Costs,
}

impl Scenario {
    pub fn new(nodes: usize, mode: RevisionMode, schema: ValueSchema) -> Self {
        Scenario {
            nodes,
            mode,
            schema,
            topology: TopologySpec::default(),
            link: LinkSpec::default(),
            sync_interval_ms: default_interval(),
            workload: None,
            events: Vec::new(),
            quiescence_ms: default_quiescence(),
            serving_node: default_serving(),
            request_timeout_ms: default_timeout(),
            costs: Costs::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        let n = self.nodes as u64;
        let topology = self.topology.build(self.nodes)?;
        if !(1..=n).contains(&self.serving_node) {
            return bad(format!("serving_node {} out of 1..={n}", self.serving_node));
        }
        if let Some(i) = self.sync_interval_ms {
            if i < 10 {
                return bad(format!("sync_interval_ms {i} below 10"));
            }
        }
        check_link_params(self.link.delay_ms, self.link.variation, self.link.correlation)?;
        if let Some(w) = &self.workload {
            if !(w.rate > 0.0) || !(w.duration_s >= 0.0) || !(0.0..=1.0).contains(&w.read_fraction) || w.key_count == 0 {
                return bad("workload needs rate > 0, duration >= 0, read_fraction in [0, 1], key_count > 0".into());
            }
        }
        if self.events.windows(2).any(|w| w[0].t_ms > w[1].t_ms) {
            return bad("events must be sorted by t_ms".into());
        }
        for e in &self.events {
            if let Some(id) = e.isolate.iter().find(|id| !(1..=n).contains(*id)) {
                return bad(format!("event at {} ms isolates unknown node {id}", e.t_ms));
            }
            if let Some([a, b]) = e.links.iter().find(|[a, b]| !topology.has_edge(a.wrapping_sub(1), b.wrapping_sub(1))) {
                return bad(format!("event at {} ms names missing link {a}-{b}", e.t_ms));
            }
            match e.action {
                Action::Partition if e.isolate.is_empty() && e.links.is_empty() => {
                    return bad(format!("partition at {} ms names no nodes or links", e.t_ms));
                }
                Action::SetLatency => {
                    let Some(d) = e.delay_ms else {
                        return bad(format!("set_latency at {} ms lacks delay_ms", e.t_ms));
                    };
                    check_link_params(d, e.variation.unwrap_or(0.0), e.correlation.unwrap_or(0.0))?;
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_link_params(delay_ms: f64, variation: f64, correlation: f64) -> Result<(), SimError> {
    if !(delay_ms >= 0.0) || !(0.0..=1.0).contains(&variation) || !(0.0..=1.0).contains(&correlation) {
        return Err(SimError::Scenario(format!(
            "link needs delay >= 0 and variation, correlation in [0, 1]; got {delay_ms}, {variation}, {correlation}"
        )));
    }
    Ok(())
}
