use serde::{Deserialize, Serialize};

use crate::engine::WorkflowOperation;
use crate::gateway::{Call, FaultPolicy, ReadMode};
use crate::model::NodeId;

/// A declarative cluster run. Times are simulated milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub nodes: u32,
    pub f: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default = "default_read_mode")]
    pub read_mode: ReadMode,
    #[serde(default = "default_policy")]
    pub fault_policy: FaultPolicy,
    #[serde(default)]
    pub audit_interval_ms: Option<u64>,
    /// Per-node clock offsets; node-local timestamps only.
    #[serde(default)]
    pub clock_offsets: Vec<u64>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub steps: Vec<Step>,
    pub stop: Stop,
}

fn default_read_mode() -> ReadMode {
    ReadMode::UnorderedConsensus
}

fn default_policy() -> FaultPolicy {
    FaultPolicy::FailEarly
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Latency {
    pub min_ms: u64,
    pub max_ms: u64,
}

impl Default for Latency {
    fn default() -> Self {
        Latency { min_ms: 1, max_ms: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Stop {
    /// Hard limit on simulated time.
    pub max_time_ms: u64,
    /// Stop once all steps ran, every call finished and live nodes agree,
    /// after this much extra settling time.
    #[serde(default)]
    pub quiescence_ms: Option<u64>,
}

/// A time window; `until` is exclusive and open-ended when absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Window {
    #[serde(default)]
    pub from: u64,
    #[serde(default)]
    pub until: Option<u64>,
}

impl Window {
    pub fn contains(&self, t: u64) -> bool {
        t >= self.from && self.until.is_none_or(|u| t < u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Fault {
    pub target: NodeId,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum FaultKind {
    Crash { at: u64 },
    DelayLinks { factor: u64, #[serde(default)] window: Window },
    DropLinks { probability: f64, #[serde(default)] window: Window },
    /// The target sends a different pre-prepare digest to odd-numbered nodes.
    EquivocateLeader { #[serde(default)] window: Window },
    CorruptEngineState { at: u64 },
    CorruptBlock { height: u64, at: u64 },
    CorruptSnapshot,
}

impl FaultKind {
    /// Faults that make the target behave incorrectly rather than just slowly.
    pub fn is_byzantine(&self) -> bool {
        matches!(
            self,
            FaultKind::EquivocateLeader { .. }
                | FaultKind::CorruptEngineState { .. }
                | FaultKind::CorruptBlock { .. }
                | FaultKind::CorruptSnapshot
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Action {
    /// A gateway call on one node.
    Call { node: NodeId, call: Call },
    /// Every live, ready node starts its enabled items and completes its
    /// started ones, `rounds` times, `interval_ms` apart.
    Advance {
        rounds: u32,
        #[serde(default = "default_interval")]
        interval_ms: u64,
        #[serde(default)]
        data: std::collections::BTreeMap<String, String>,
    },
    /// The node orders an operation without its own visibility check.
    SubmitUnchecked { node: NodeId, operation: WorkflowOperation },
    Recover { node: NodeId },
    /// Starts a node that is not a member yet; it asks to join.
    Join { node: NodeId },
    /// Stops a node and starts it again on the same storage.
    Restart { node: NodeId, #[serde(default)] down_ms: u64 },
}

fn default_interval() -> u64 {
    200
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("{0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Scenario, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.nodes < 3 * self.f + 1 {
            return bad(format!("{} nodes cannot tolerate f={}", self.nodes, self.f));
        }
        if self.latency.min_ms > self.latency.max_ms {
            return bad("latency minMs exceeds maxMs".into());
        }
        let byzantine: std::collections::BTreeSet<NodeId> =
            self.faults.iter().filter(|f| f.kind.is_byzantine()).map(|f| f.target).collect();
        if byzantine.len() > self.f as usize {
            return bad(format!("{} byzantine targets exceed f={}", byzantine.len(), self.f));
        }
        for f in &self.faults {
            if f.target.0 >= self.nodes {
                return bad(format!("fault targets unknown node {}", f.target));
            }
            if let FaultKind::DropLinks { probability, .. } = f.kind {
                if !(0.0..=1.0).contains(&probability) {
                    return bad(format!("drop probability {probability} out of range"));
                }
            }
        }
        for s in &self.steps {
            let node = match &s.action {
                Action::Call { node, .. }
                | Action::SubmitUnchecked { node, .. }
                | Action::Recover { node }
                | Action::Restart { node, .. } => Some(*node),
                _ => None,
            };
            if let Some(n) = node {
                if n.0 >= self.nodes && !self.joins(n) {
                    return bad(format!("step at {} targets unknown node {n}", s.at));
                }
            }
            if let Action::Join { node } = &s.action {
                if node.0 < self.nodes {
                    return bad(format!("node {node} is already a member"));
                }
            }
        }
        Ok(())
    }

    fn joins(&self, n: NodeId) -> bool {
        self.steps.iter().any(|s| matches!(s.action, Action::Join { node } if node == n))
    }
}
