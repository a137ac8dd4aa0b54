//! Deterministic discrete-event simulation of a whole cluster.
//!
//! One thread, one seeded RNG, one event queue ordered by
//! `(time, seeded tiebreak, insertion counter)`. Nodes are the same
//! [`Node`] values that run on sockets; the simulator only decides when
//! each message arrives and when each node's clock reaches its deadline.
//! Messages are handed over as values; [`Simulation::check_encoding`] also
//! pushes each one through its sealed byte form.
//!
//! Same scenario, same seed: same event trace, same report, byte for byte.

mod scenario;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

pub use scenario::{Action, Fault, FaultKind, Latency, Scenario, ScenarioError, Step, Stop, Window};

use crate::auth::KeyRing;
use crate::digest::Digest;
use crate::engine::{BlockRef, Operation, ReadQuery, WorkItemState};
use crate::gateway::{AppStats, Call, Disk, DivergenceEvent, Envelope, Node, NodeSettings, NodeStats, Wire};
use crate::model::NodeId;
use crate::ordering::{ConsensusMessage, ReplicaStats, Settings, ViewConfig};

const CLUSTER_SECRET: &[u8] = b"simulated cluster";

/// Operator key of simulated clusters.
pub fn operator_key(seed: u64) -> [u8; 32] {
    Digest::of_parts(&[b"operator", &seed.to_be_bytes()]).0
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OpRecord {
    pub id: u64,
    pub node: NodeId,
    pub call: String,
    pub submitted_at: u64,
    pub completed_at: Option<u64>,
    pub latency_ms: Option<u64>,
    pub ok: Option<bool>,
    pub outcome: Option<Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeReport {
    pub node: NodeId,
    pub live: bool,
    pub ready: bool,
    pub head: BlockRef,
    pub engine_digest: Digest,
    pub chain: String,
    pub executed: u64,
    pub view: u64,
    pub members: Vec<NodeId>,
    pub ordering: ReplicaStats,
    pub blocks: AppStats,
    pub gateway: NodeStats,
    pub divergences: Vec<DivergenceEvent>,
    /// One line per block: `height@seq opType by origin`.
    pub executed_ops: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub end_ms: u64,
    pub quiescent: bool,
    pub live_heads_equal: bool,
    pub live_digests_equal: bool,
    /// Some call did not complete, or timed out waiting for a quorum.
    pub liveness_lost: bool,
    pub nodes: Vec<NodeReport>,
    pub ops: Vec<OpRecord>,
    pub messages_delivered: u64,
    pub trace_hash: Digest,
}

#[derive(Clone, Debug)]
enum Event {
    Deliver { from: NodeId, to: NodeId, wire: Wire },
    Wake { node: NodeId },
    Step { index: usize, rounds_left: u32 },
    Fault { index: usize },
    Start { node: NodeId },
}

pub struct Simulation {
    scenario: Scenario,
    rng: ChaCha8Rng,
    now: u64,
    queue: BinaryHeap<Reverse<(u64, u64, u64)>>,
    events: BTreeMap<u64, Event>,
    counter: u64,
    nodes: BTreeMap<NodeId, Node>,
    crashed: BTreeSet<NodeId>,
    stopped: BTreeMap<NodeId, Disk>,
    wake_at: BTreeMap<NodeId, u64>,
    initial: ViewConfig,
    settings: NodeSettings,
    ops: BTreeMap<u64, OpRecord>,
    next_call: u64,
    steps_left: usize,
    quiet_since: Option<u64>,
    trace: Sha256,
    delivered: u64,
    check_encoding: bool,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Simulation, ScenarioError> {
        scenario.validate()?;
        let members: Vec<NodeId> = (0..scenario.nodes).map(NodeId).collect();
        let initial = ViewConfig::new(members.clone(), scenario.f).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let settings = NodeSettings {
            read_mode: scenario.read_mode,
            fault_policy: scenario.fault_policy,
            audit_interval_ms: scenario.audit_interval_ms,
            consensus: Settings { operator_key: Some(operator_key(scenario.seed)), ..Settings::default() },
            ..NodeSettings::default()
        };
        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            now: 0,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            counter: 0,
            nodes: BTreeMap::new(),
            crashed: BTreeSet::new(),
            stopped: BTreeMap::new(),
            wake_at: BTreeMap::new(),
            initial,
            settings,
            ops: BTreeMap::new(),
            next_call: 1,
            steps_left: scenario.steps.len(),
            quiet_since: None,
            trace: Sha256::new(),
            delivered: 0,
            check_encoding: false,
            scenario,
        };
        for m in members {
            sim.start_node(m, Disk::memory());
        }
        for (index, s) in sim.scenario.steps.clone().iter().enumerate() {
            let rounds_left = match s.action {
                Action::Advance { rounds, .. } => rounds,
                _ => 1,
            };
            sim.push(s.at, Event::Step { index, rounds_left });
        }
        for (index, f) in sim.scenario.faults.clone().iter().enumerate() {
            let at = match f.kind {
                FaultKind::Crash { at } | FaultKind::CorruptEngineState { at } | FaultKind::CorruptBlock { at, .. } => at,
                _ => 0,
            };
            sim.push(at, Event::Fault { index });
        }
        Ok(sim)
    }

    /// Seals, encodes, decodes and opens every message before delivery,
    /// panicking if it does not come back identical. Slow; for tests.
    pub fn check_encoding(&mut self, on: bool) {
        self.check_encoding = on;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(|n| !self.crashed.contains(&n.id()))
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id) && !self.crashed.contains(&id)
    }

    /// Crashes `id` now, outside the scenario's fault list. The node keeps
    /// its state for inspection but never runs again.
    pub fn crash(&mut self, id: NodeId) {
        if self.nodes.contains_key(&id) {
            self.crashed.insert(id);
        }
    }

    pub fn op(&self, id: u64) -> Option<&OpRecord> {
        self.ops.get(&id)
    }

    pub fn ops(&self) -> impl Iterator<Item = &OpRecord> {
        self.ops.values()
    }

    fn clock(&self, node: NodeId) -> u64 {
        self.now + self.scenario.clock_offsets.get(node.0 as usize).copied().unwrap_or(0)
    }

    fn push(&mut self, at: u64, ev: Event) {
        let tiebreak: u64 = self.rng.gen();
        self.counter += 1;
        self.queue.push(Reverse((at, tiebreak, self.counter)));
        self.events.insert(self.counter, ev);
    }

    fn start_node(&mut self, id: NodeId, disk: Disk) {
        let keys = KeyRing::from_secret(id, CLUSTER_SECRET);
        let now = self.clock(id);
        let node = Node::start(id, keys, self.initial.clone(), self.settings.clone(), disk, now);
        self.nodes.insert(id, node);
        self.crashed.remove(&id);
        self.wake_at.remove(&id);
        self.after(id);
    }

    /// Issues a gateway call on `node` at the current time. Returns its id.
    pub fn call(&mut self, node: NodeId, call: Call) -> u64 {
        let id = self.next_call;
        self.next_call += 1;
        self.ops.insert(
            id,
            OpRecord {
                id,
                node,
                call: call.name().to_string(),
                submitted_at: self.now,
                completed_at: None,
                latency_ms: None,
                ok: None,
                outcome: None,
            },
        );
        let now = self.clock(node);
        if self.crashed.contains(&node) || !self.nodes.contains_key(&node) {
            return id;
        }
        self.nodes.get_mut(&node).expect("present").handle_call(id, call, now);
        self.after(node);
        id
    }

    /// Routes a node's output and re-arms its wake-up.
    fn after(&mut self, id: NodeId) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let out = node.drain();
        let done = node.take_completed();
        let deadline = node.next_deadline();
        for (call, r) in done {
            if let Some(op) = self.ops.get_mut(&call) {
                op.completed_at = Some(self.now);
                op.latency_ms = Some(self.now - op.submitted_at);
                op.ok = Some(r.is_ok());
                op.outcome = Some(match r {
                    Ok(v) => v,
                    Err(e) => serde_json::to_value(&e).expect("error serializes"),
                });
            }
        }
        for (to, wire) in out {
            self.send(id, to, wire);
        }
        if let Some(d) = deadline {
            let offset = self.clock(id) - self.now;
            let at = d.saturating_sub(offset).max(self.now + 1);
            if self.wake_at.get(&id).is_none_or(|w| at < *w) {
                self.wake_at.insert(id, at);
                self.push(at, Event::Wake { node: id });
            }
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, mut wire: Wire) {
        if self.crashed.contains(&from) {
            return;
        }
        if self.check_encoding {
            let sealed = Envelope::seal(&KeyRing::from_secret(from, CLUSTER_SECRET), to, wire.clone()).expect("key");
            let opened = Envelope::open(&KeyRing::from_secret(to, CLUSTER_SECRET), &sealed.to_bytes());
            assert_eq!(opened.map(|e| e.body).as_ref(), Ok(&wire), "{} does not survive encoding", wire.kind());
        }
        let mut delay = self.rng.gen_range(self.scenario.latency.min_ms..=self.scenario.latency.max_ms);
        for f in &self.scenario.faults {
            let touches = f.target == from || f.target == to;
            match &f.kind {
                FaultKind::DelayLinks { factor, window } if touches && window.contains(self.now) => {
                    delay *= factor;
                }
                FaultKind::DropLinks { probability, window } if touches && window.contains(self.now) => {
                    if self.rng.gen_bool(*probability) {
                        return;
                    }
                }
                FaultKind::EquivocateLeader { window } if f.target == from && window.contains(self.now) => {
                    if let Wire::Consensus(ConsensusMessage::PrePrepare { digest, .. }) = &mut wire {
                        if to.0 % 2 == 1 {
                            *digest = Digest::of_parts(&[b"equivocation", &digest.0]);
                        }
                    }
                }
                _ => {}
            }
        }
        self.push(self.now + delay, Event::Deliver { from, to, wire });
    }

    fn record(&mut self, line: String) {
        self.trace.update(line.as_bytes());
        self.trace.update(b"\n");
    }

    /// Processes events up to and including time `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(Reverse((at, _, key))) = self.queue.peek().copied() {
            if at > t {
                break;
            }
            self.queue.pop();
            self.now = at;
            let ev = self.events.remove(&key).expect("queued event");
            self.dispatch(ev);
        }
        self.now = self.now.max(t);
    }

    /// Runs to the scenario's stop condition and reports.
    pub fn run(mut self) -> ScenarioReport {
        let stop = self.scenario.stop;
        while let Some(Reverse((at, _, key))) = self.queue.peek().copied() {
            if at > stop.max_time_ms {
                break;
            }
            if let (Some(q), Some(since)) = (stop.quiescence_ms, self.quiet_since) {
                if at > since + q {
                    break;
                }
            }
            self.queue.pop();
            self.now = at;
            let ev = self.events.remove(&key).expect("queued event");
            let was_wake = matches!(ev, Event::Wake { .. });
            self.dispatch(ev);
            if was_wake && stop.quiescence_ms.is_some() {
                let q = self.is_quiet();
                match (q, self.quiet_since) {
                    (true, None) => self.quiet_since = Some(self.now),
                    (false, Some(_)) => self.quiet_since = None,
                    _ => {}
                }
            }
        }
        self.report()
    }

    fn is_quiet(&self) -> bool {
        if self.steps_left > 0 || self.ops.values().any(|o| o.completed_at.is_none() && !self.crashed.contains(&o.node)) {
            return false;
        }
        let live: Vec<&Node> = self.live_nodes().collect();
        live.iter().all(|n| n.is_ready())
            && live.windows(2).all(|w| w[0].app().chain().head() == w[1].app().chain().head())
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Deliver { from, to, wire } => {
                if self.crashed.contains(&to) || self.crashed.contains(&from) {
                    return;
                }
                let line = format!("{} {} {} {}", self.now, from, to, wire.kind());
                self.record(line);
                self.delivered += 1;
                let now = self.clock(to);
                let Some(node) = self.nodes.get_mut(&to) else { return };
                node.handle_network(from, wire, now);
                self.after(to);
            }
            Event::Wake { node } => {
                if self.wake_at.get(&node) != Some(&self.now) {
                    return;
                }
                self.wake_at.remove(&node);
                if self.crashed.contains(&node) {
                    return;
                }
                let now = self.clock(node);
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.tick(now);
                }
                self.after(node);
            }
            Event::Step { index, rounds_left } => self.run_step(index, rounds_left),
            Event::Fault { index } => self.apply_fault(index),
            Event::Start { node } => {
                let disk = self.stopped.remove(&node).unwrap_or_else(Disk::memory);
                self.record(format!("{} start {}", self.now, node));
                self.start_node(node, disk);
            }
        }
    }

    fn run_step(&mut self, index: usize, rounds_left: u32) {
        let step = self.scenario.steps[index].clone();
        self.record(format!("{} step {}", self.now, index));
        match step.action {
            Action::Call { node, call } => {
                self.call(node, call);
            }
            Action::Advance { interval_ms, data, .. } => {
                let ids: Vec<NodeId> = self.live_nodes().filter(|n| n.is_ready()).map(|n| n.id()).collect();
                for id in ids {
                    let q = ReadQuery::ListWorkItems { node: Some(id), state: None };
                    let crate::engine::QueryResult::Ok(Value::Array(items)) = self.nodes[&id].app().engine().query(&q)
                    else {
                        continue;
                    };
                    for item in items {
                        let wid = item["id"].as_str().unwrap_or_default().to_string();
                        let state: Option<WorkItemState> = serde_json::from_value(item["state"].clone()).ok();
                        let op = match state {
                            Some(WorkItemState::Enabled) => Operation::StartWorkItem { work_item_id: wid },
                            Some(WorkItemState::Started) => {
                                Operation::CompleteWorkItem { work_item_id: wid, data: data.clone() }
                            }
                            _ => continue,
                        };
                        self.call(id, Call::Write { op });
                    }
                }
                if rounds_left > 1 {
                    self.push(self.now + interval_ms, Event::Step { index, rounds_left: rounds_left - 1 });
                    return;
                }
            }
            Action::SubmitUnchecked { node, operation } => {
                let id = self.next_call;
                self.next_call += 1;
                self.ops.insert(
                    id,
                    OpRecord {
                        id,
                        node,
                        call: format!("unchecked:{}", operation.op.name()),
                        submitted_at: self.now,
                        completed_at: None,
                        latency_ms: None,
                        ok: None,
                        outcome: None,
                    },
                );
                let now = self.clock(node);
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.submit_unchecked(Some(id), operation, now);
                }
                self.after(node);
            }
            Action::Recover { node } => {
                let now = self.clock(node);
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.recover(now);
                }
                self.after(node);
            }
            Action::Join { node } => self.start_node(node, Disk::memory()),
            Action::Restart { node, down_ms } => {
                if let Some(n) = self.nodes.remove(&node) {
                    self.crashed.insert(node);
                    self.stopped.insert(node, n.shutdown());
                    self.push(self.now + down_ms.max(1), Event::Start { node });
                }
            }
        }
        self.steps_left -= 1;
    }

    fn apply_fault(&mut self, index: usize) {
        let f = self.scenario.faults[index].clone();
        self.record(format!("{} fault {} {}", self.now, index, f.target));
        let Some(node) = self.nodes.get_mut(&f.target) else { return };
        match f.kind {
            FaultKind::Crash { .. } => {
                self.crashed.insert(f.target);
            }
            FaultKind::CorruptEngineState { .. } => corrupt_engine(node),
            FaultKind::CorruptBlock { height, .. } => {
                let _ = node.app_mut().disk_mut().chain.tamper(height, |b| {
                    if let Some(x) = b.payload.first_mut() {
                        *x ^= 0x20;
                    } else {
                        b.payload.push(0);
                    }
                });
            }
            FaultKind::CorruptSnapshot => node.app_mut().corrupt_snapshots = true,
            FaultKind::DelayLinks { .. } | FaultKind::DropLinks { .. } | FaultKind::EquivocateLeader { .. } => {}
        }
    }

    pub fn report(&self) -> ScenarioReport {
        let nodes: Vec<NodeReport> = self
            .nodes
            .values()
            .map(|n| {
                let chain = n.app().chain();
                NodeReport {
                    node: n.id(),
                    live: !self.crashed.contains(&n.id()),
                    ready: n.is_ready(),
                    head: chain.head(),
                    engine_digest: n.app().engine().digest(),
                    chain: chain.verify().to_string(),
                    executed: n.replica().last_executed(),
                    view: n.config().view,
                    members: n.config().members.clone(),
                    ordering: n.replica().stats().clone(),
                    blocks: n.app().stats().clone(),
                    gateway: n.stats().clone(),
                    divergences: n.divergences().to_vec(),
                    executed_ops: chain
                        .iter()
                        .map(|b| {
                            let op = serde_json::from_slice::<Value>(&b.payload)
                                .ok()
                                .and_then(|v| v["opType"].as_str().map(str::to_owned))
                                .unwrap_or_else(|| "malformed".into());
                            format!("{}@{} {} by {}", b.height, b.seq, op, b.origin)
                        })
                        .collect(),
                }
            })
            .collect();
        let live: Vec<&NodeReport> = nodes.iter().filter(|n| n.live).collect();
        let all_eq = |f: &dyn Fn(&NodeReport) -> Vec<u8>| live.windows(2).all(|w| f(w[0]) == f(w[1]));
        let liveness_lost = self.ops.values().any(|o| {
            o.completed_at.is_none()
                || o.outcome.as_ref().is_some_and(|v| v["kind"] == "consensus-timeout")
        });
        ScenarioReport {
            name: self.scenario.name.clone(),
            seed: self.scenario.seed,
            end_ms: self.now,
            quiescent: self.quiet_since.is_some(),
            live_heads_equal: all_eq(&|n| n.head.hash.0.to_vec()),
            live_digests_equal: all_eq(&|n| n.engine_digest.0.to_vec()),
            liveness_lost,
            nodes,
            ops: self.ops.values().cloned().collect(),
            messages_delivered: self.delivered,
            trace_hash: Digest(self.trace.clone().finalize().into()),
        }
    }
}

/// Damages replicated engine state the way a faulty database would.
fn corrupt_engine(node: &mut Node) {
    let state = node.app_mut().engine_mut().state_mut();
    if let Some(item) = state.work_items.values_mut().next() {
        item.state = if item.state == WorkItemState::Cancelled { WorkItemState::Completed } else { WorkItemState::Cancelled };
    } else if let Some(case) = state.cases.values_mut().next() {
        case.case_data.insert("corrupted".into(), "yes".into());
    } else {
        state.applied_count += 1000;
    }
}

#[cfg(test)]
mod tests;
