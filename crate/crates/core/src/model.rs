//! Workflow specifications and the identifier scheme shared by all nodes.
//!
//! A specification is a small task graph. Every task is owned by exactly one
//! node; tasks route tokens with AND or XOR splits and joins. Specs are stored
//! as JSON, one spec per document:
//!
//! ```json
//! {
//!   "specId": "order", "version": 1,
//!   "tasks": [
//!     {"taskId": "A", "assignedNode": 0, "splitType": "AND", "joinType": "AND", "kind": "user",
//!      "timer": {"trigger": "onEnablement", "durationMs": 1000}}
//!   ],
//!   "edges": [{"from": "A", "to": "B"}],
//!   "start": ["A"], "end": ["B"]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical;

/// Node identifier; a small integer mapped to an address by configuration.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "AND")]
    And,
    #[serde(rename = "XOR")]
    Xor,
}

pub type Join = Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TaskKind {
    User,
    Automatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TimerTrigger {
    /// Runs from enablement; expiry cancels an item that was never started.
    OnEnablement,
    /// Runs from start; expiry skips an item that is started but not completed.
    OnStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimerDef {
    pub trigger: TimerTrigger,
    pub duration_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskDef {
    pub task_id: String,
    pub assigned_node: NodeId,
    pub split_type: Split,
    pub join_type: Join,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timer: Option<TimerDef>,
    pub kind: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkflowSpec {
    pub spec_id: String,
    pub version: u32,
    pub tasks: Vec<TaskDef>,
    pub edges: Vec<Edge>,
    pub start: Vec<String>,
    pub end: Vec<String>,
}

/// Key under which a loaded spec is stored: `specId` plus version.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SpecKey {
    pub spec_id: String,
    pub version: u32,
}

impl fmt::Display for SpecKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.spec_id, self.version)
    }
}

impl WorkflowSpec {
    pub fn key(&self) -> SpecKey {
        SpecKey { spec_id: self.spec_id.clone(), version: self.version }
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskDef> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn successors<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |e| e.from == task_id).map(|e| e.to.as_str())
    }

    pub fn predecessors<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |e| e.to == task_id).map(|e| e.from.as_str())
    }
}

/// One violated spec invariant. Displays as `kind` or `kind:element`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: &'static str,
    pub element: Option<String>,
}

impl Violation {
    fn new(kind: &'static str, element: impl Into<String>) -> Self {
        Violation { kind, element: Some(element.into()) }
    }

    fn bare(kind: &'static str) -> Self {
        Violation { kind, element: None }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.element {
            Some(e) => write!(f, "{}:{}", self.kind, e),
            None => f.write_str(self.kind),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("malformed spec document: {0}")]
    Malformed(String),
    #[error("task {0:?} has no assignedNode")]
    MissingAssignment(String),
    #[error("reference to unknown task {0:?}")]
    UnknownTask(String),
    #[error("no end task is reachable from a start task")]
    Disconnected,
    #[error("invalid spec: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
}

/// Checks every spec invariant. Empty result means the spec is valid.
pub fn validate_spec(spec: &WorkflowSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.spec_id.is_empty() {
        out.push(Violation::bare("empty-spec-id"));
    }
    if spec.version == 0 {
        out.push(Violation::new("non-positive-version", spec.version.to_string()));
    }
    if spec.tasks.is_empty() {
        out.push(Violation::bare("no-tasks"));
    }

    let mut ids = BTreeSet::new();
    for t in &spec.tasks {
        if t.task_id.is_empty() || t.task_id.contains('.') {
            out.push(Violation::new("bad-task-id", t.task_id.clone()));
        }
        if !ids.insert(t.task_id.as_str()) {
            out.push(Violation::new("duplicate-task-id", t.task_id.clone()));
        }
        if let Some(timer) = &t.timer {
            if timer.duration_ms == 0 {
                out.push(Violation::new("zero-timer-duration", t.task_id.clone()));
            }
        }
    }

    for e in &spec.edges {
        for end in [&e.from, &e.to] {
            if !ids.contains(end.as_str()) {
                out.push(Violation::new("unknown-task", end.clone()));
            }
        }
    }
    if spec.start.is_empty() {
        out.push(Violation::bare("no-start-task"));
    }
    if spec.end.is_empty() {
        out.push(Violation::bare("no-end-task"));
    }
    for s in spec.start.iter().chain(&spec.end) {
        if !ids.contains(s.as_str()) {
            out.push(Violation::new("unknown-task", s.clone()));
        }
    }

    // Only meaningful once references resolve.
    if out.is_empty() && !end_reachable(spec) {
        out.push(Violation::bare("unreachable-end"));
    }
    out
}

fn end_reachable(spec: &WorkflowSpec) -> bool {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &spec.edges {
        adj.entry(e.from.as_str()).or_default().push(e.to.as_str());
    }
    let ends: BTreeSet<&str> = spec.end.iter().map(String::as_str).collect();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut queue: VecDeque<&str> = spec.start.iter().map(String::as_str).collect();
    while let Some(t) = queue.pop_front() {
        if !seen.insert(t) {
            continue;
        }
        if ends.contains(t) {
            return true;
        }
        queue.extend(adj.get(t).into_iter().flatten().copied());
    }
    false
}

/// Parses and validates a spec document.
pub fn parse_spec(document: &str) -> Result<WorkflowSpec, SpecError> {
    let raw: serde_json::Value =
        serde_json::from_str(document).map_err(|e| SpecError::Malformed(e.to_string()))?;
    if let Some(tasks) = raw.get("tasks").and_then(|t| t.as_array()) {
        for t in tasks {
            if t.get("assignedNode").is_none() {
                let id = t.get("taskId").and_then(|v| v.as_str()).unwrap_or("?");
                return Err(SpecError::MissingAssignment(id.to_string()));
            }
        }
    }
    let spec: WorkflowSpec =
        serde_json::from_value(raw).map_err(|e| SpecError::Malformed(e.to_string()))?;
    check_spec(&spec)?;
    Ok(spec)
}

/// Validation as a `Result`, mapping the most specific violation to its error.
pub fn check_spec(spec: &WorkflowSpec) -> Result<(), SpecError> {
    let violations = validate_spec(spec);
    if violations.is_empty() {
        return Ok(());
    }
    if let Some(v) = violations.iter().find(|v| v.kind == "unknown-task") {
        return Err(SpecError::UnknownTask(v.element.clone().unwrap_or_default()));
    }
    if violations.iter().any(|v| v.kind == "unreachable-end") {
        return Err(SpecError::Disconnected);
    }
    Err(SpecError::Invalid(violations))
}

/// Canonical JSON of a spec; `parse_spec` inverts it.
pub fn serialize_spec(spec: &WorkflowSpec) -> String {
    canonical::to_string(spec)
}

/// Case identifier: the chain position of the block holding the launch.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct CaseId(pub u64);

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for CaseId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for CaseId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(CaseId).map_err(serde::de::Error::custom)
    }
}

/// `caseId.taskId.enablementCounter`, e.g. `3.A.1`.
pub fn work_item_id(case: CaseId, task_id: &str, counter: u32) -> String {
    format!("{case}.{task_id}.{counter}")
}

/// Splits a work item id into its case and task parts.
pub fn split_work_item_id(id: &str) -> Option<(CaseId, &str, u32)> {
    let (case, rest) = id.split_once('.')?;
    let (task, counter) = rest.rsplit_once('.')?;
    Some((CaseId(case.parse().ok()?), task, counter.parse().ok()?))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn task(id: &str, node: u32, split: Split, join: Join) -> TaskDef {
        TaskDef {
            task_id: id.into(),
            assigned_node: NodeId(node),
            split_type: split,
            join_type: join,
            timer: None,
            kind: TaskKind::User,
        }
    }

    pub fn edge(a: &str, b: &str) -> Edge {
        Edge { from: a.into(), to: b.into() }
    }

    /// A(node 0) -> B(node 1) -> C(node 2), all AND.
    pub fn sequence3() -> WorkflowSpec {
        WorkflowSpec {
            spec_id: "seq".into(),
            version: 1,
            tasks: vec![
                task("A", 0, Split::And, Split::And),
                task("B", 1, Split::And, Split::And),
                task("C", 2, Split::And, Split::And),
            ],
            edges: vec![edge("A", "B"), edge("B", "C")],
            start: vec!["A".into()],
            end: vec!["C".into()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    const SEQ3: &str = r#"{
        "specId": "seq", "version": 1,
        "tasks": [
            {"taskId": "A", "assignedNode": 0, "splitType": "AND", "joinType": "AND", "kind": "user"},
            {"taskId": "B", "assignedNode": 1, "splitType": "AND", "joinType": "AND", "kind": "user"},
            {"taskId": "C", "assignedNode": 2, "splitType": "AND", "joinType": "AND", "kind": "automatic"}
        ],
        "edges": [{"from": "A", "to": "B"}, {"from": "B", "to": "C"}],
        "start": ["A"], "end": ["C"]
    }"#;

    #[test]
    fn parses_three_task_sequence() {
        let spec = parse_spec(SEQ3).unwrap();
        assert_eq!(spec.tasks.len(), 3);
        assert_eq!(spec.edges.len(), 2);
        assert_eq!(spec.task("B").unwrap().assigned_node, NodeId(1));
    }

    #[test]
    fn unknown_edge_target_is_rejected() {
        let doc = SEQ3.replace(r#"{"from": "B", "to": "C"}"#, r#"{"from": "B", "to": "Z"}"#);
        assert_eq!(parse_spec(&doc), Err(SpecError::UnknownTask("Z".into())));
    }

    #[test]
    fn missing_assignment_is_rejected() {
        let doc = SEQ3.replace(r#""taskId": "B", "assignedNode": 1,"#, r#""taskId": "B","#);
        assert_eq!(parse_spec(&doc), Err(SpecError::MissingAssignment("B".into())));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(parse_spec("{not json"), Err(SpecError::Malformed(_))));
        assert!(matches!(parse_spec(r#"{"specId": 3}"#), Err(SpecError::Malformed(_))));
    }

    #[test]
    fn valid_sequence_has_no_violations() {
        assert!(validate_spec(&sequence3()).is_empty());
    }

    #[test]
    fn duplicate_task_id_is_reported() {
        let mut spec = sequence3();
        spec.tasks[1].task_id = "A".into();
        spec.edges = vec![edge("A", "C")];
        let v: Vec<String> = validate_spec(&spec).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["duplicate-task-id:A"]);
    }

    #[test]
    fn zero_timer_is_reported() {
        let mut spec = sequence3();
        spec.tasks[0].timer = Some(TimerDef { trigger: TimerTrigger::OnStart, duration_ms: 0 });
        let v: Vec<String> = validate_spec(&spec).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["zero-timer-duration:A"]);
    }

    /// Brute-force reachability oracle: repeatedly relax the edge set until a
    /// fixpoint, independent of the queue-based search in `validate_spec`.
    fn reachable_oracle(spec: &WorkflowSpec) -> bool {
        let mut reach: BTreeSet<String> = spec.start.iter().cloned().collect();
        loop {
            let before = reach.len();
            for e in &spec.edges {
                if reach.contains(&e.from) {
                    reach.insert(e.to.clone());
                }
            }
            if reach.len() == before {
                break;
            }
        }
        spec.end.iter().any(|e| reach.contains(e))
    }

    #[test]
    fn unreachable_end_is_reported() {
        // A -> B, C isolated and the only end task.
        let mut spec = sequence3();
        spec.edges = vec![edge("A", "B")];
        assert!(!reachable_oracle(&spec));
        let v: Vec<String> = validate_spec(&spec).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["unreachable-end"]);
        assert_eq!(check_spec(&spec), Err(SpecError::Disconnected));
    }

    #[test]
    fn reachability_agrees_with_oracle_on_all_edge_subsets() {
        // Every subset of edges over four tasks.
        let names = ["A", "B", "C", "D"];
        let all: Vec<Edge> = names
            .iter()
            .flat_map(|a| names.iter().filter(move |b| *b != a).map(move |b| edge(a, b)))
            .collect();
        for mask in 0u32..(1 << all.len()) {
            let spec = WorkflowSpec {
                spec_id: "g".into(),
                version: 1,
                tasks: names.iter().map(|n| task(n, 0, Split::And, Split::And)).collect(),
                edges: all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, e)| e.clone()).collect(),
                start: vec!["A".into()],
                end: vec!["D".into()],
            };
            assert_eq!(end_reachable(&spec), reachable_oracle(&spec), "mask {mask:#x}");
        }
    }

    #[test]
    fn serialize_round_trip() {
        let spec = parse_spec(SEQ3).unwrap();
        assert_eq!(parse_spec(&serialize_spec(&spec)).unwrap(), spec);
    }

    #[test]
    fn work_item_ids() {
        let id = work_item_id(CaseId(12), "Review", 3);
        assert_eq!(id, "12.Review.3");
        assert_eq!(split_work_item_id(&id), Some((CaseId(12), "Review", 3)));
        assert_eq!(split_work_item_id("x.A.1"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_spec() -> impl Strategy<Value = WorkflowSpec> {
            (2usize..6, any::<u64>()).prop_map(|(n, bits)| {
                let names: Vec<String> = (0..n).map(|i| format!("T{i}")).collect();
                let tasks = names
                    .iter()
                    .enumerate()
                    .map(|(i, name)| TaskDef {
                        task_id: name.clone(),
                        assigned_node: NodeId((bits >> i) as u32 % 4),
                        split_type: if bits >> (i + 8) & 1 == 1 { Split::Xor } else { Split::And },
                        join_type: if bits >> (i + 16) & 1 == 1 { Split::Xor } else { Split::And },
                        timer: (bits >> (i + 24) & 1 == 1).then_some(TimerDef {
                            trigger: TimerTrigger::OnStart,
                            duration_ms: 10 + i as u64,
                        }),
                        kind: TaskKind::User,
                    })
                    .collect();
                let edges = names.windows(2).map(|w| edge(&w[0], &w[1])).collect();
                WorkflowSpec {
                    spec_id: format!("s{}", bits % 97),
                    version: 1 + (bits % 5) as u32,
                    tasks,
                    edges,
                    start: vec![names[0].clone()],
                    end: vec![names[n - 1].clone()],
                }
            })
        }

        proptest! {
            #[test]
            fn parse_inverts_serialize(spec in arb_spec()) {
                prop_assert!(validate_spec(&spec).is_empty());
                prop_assert_eq!(parse_spec(&serialize_spec(&spec)).unwrap(), spec);
            }
        }
    }
}
