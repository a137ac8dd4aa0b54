//! The node façade.
//!
//! A [`Node`] bundles an ordering replica, an ordering client, the block
//! store and the engine. It is sans-IO: the host feeds it network messages,
//! caller requests and clock readings, and collects outgoing messages and
//! completed calls. The same code runs under the simulator and on sockets.
//!
//! Writes go: visibility pre-check, ordered request, block creation and
//! engine execution on every replica, 2f+1 matching replies. Reads use one
//! of three modes. Under [`FaultPolicy::FailEarly`] the node compares its
//! local answers with the consensus answers and resets itself on a mismatch
//! that survives the re-checks.

mod app;
mod classify;
mod disk;
mod wire;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use app::{AppCheckpoint, AppStats, NodeApp, StartupReport, SNAPSHOT_MIN_BLOCKS};
pub use classify::{classify, CallClass, Locality, Mutation, CALLS};
pub use disk::{Disk, DiskError};
pub use wire::{Envelope, EnvelopeError, GatewayRequest, ReadReply, Wire, WriteReply};

use crate::auth::KeyRing;
use crate::blockstore::Verification;
use crate::canonical;
use crate::digest::Digest;
use crate::engine::{Operation, OperationResult, QueryResult, ReadQuery, WorkflowOperation};
use crate::model::NodeId;
use crate::ordering::{
    Client, ClientEvent, ClientSettings, ConfigChange, ConsensusMessage, Mode, Phase, Replica, RequestBody, Settings,
    ViewConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ReadMode {
    LocalBypass,
    UnorderedConsensus,
    OrderedConsensus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FaultPolicy {
    FailEarly,
    KeepOperating,
}

#[derive(Clone, Debug)]
pub struct NodeSettings {
    pub read_mode: ReadMode,
    pub fault_policy: FaultPolicy,
    pub consensus: Settings,
    pub client: ClientSettings,
    /// Re-checks after a mismatch before it counts as divergence.
    pub recheck_attempts: u32,
    pub recheck_interval_ms: u64,
    /// Periodic comparison of the engine digest and chain with the cluster.
    pub audit_interval_ms: Option<u64>,
    pub join_retry_ms: u64,
    /// Static block-exchange peers; every member when `None`.
    pub block_peers: Option<Vec<NodeId>>,
}

impl Default for NodeSettings {
    fn default() -> Self {
        NodeSettings {
            read_mode: ReadMode::UnorderedConsensus,
            fault_policy: FaultPolicy::FailEarly,
            consensus: Settings::default(),
            client: ClientSettings::default(),
            recheck_attempts: 2,
            recheck_interval_ms: 100,
            audit_interval_ms: None,
            join_retry_ms: 2000,
            block_peers: None,
        }
    }
}

/// A call from a local user of the node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Call {
    Write {
        #[serde(flatten)]
        op: Operation,
    },
    Read {
        #[serde(flatten)]
        query: ReadQuery,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<ReadMode>,
    },
    ScheduleLaunch {
        spec_id: String,
        version: u32,
        #[serde(default)]
        case_data: BTreeMap<String, String>,
        delay_ms: u64,
    },
    RegisterService { name: String, url: String },
    RetrieveServices,
    NodeStatus,
}

impl Call {
    pub fn name(&self) -> &'static str {
        match self {
            Call::Write { op } => op.name(),
            Call::Read { query, .. } => match query {
                ReadQuery::ListSpecifications => "listSpecifications",
                ReadQuery::ListCases => "listCases",
                ReadQuery::CaseState { .. } => "caseState",
                ReadQuery::CaseData { .. } => "caseData",
                ReadQuery::ListWorkItems { .. } => "listWorkItems",
                ReadQuery::GetWorkItem { .. } => "getWorkItem",
                ReadQuery::EngineDigest => "engineDigest",
            },
            Call::ScheduleLaunch { .. } => "ScheduleLaunch",
            Call::RegisterService { .. } => "RegisterService",
            Call::RetrieveServices => "RetrieveServices",
            Call::NodeStatus => "NodeStatus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayErrorKind {
    VisibilityViolation,
    ConsensusTimeout,
    /// The ordered operation was rejected by the engines.
    ConsensusError,
    InvalidCall,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "camelCase")]
#[error("{kind:?}: {message}")]
pub struct GatewayError {
    pub kind: GatewayErrorKind,
    pub message: String,
    /// Engine error code for `ConsensusError`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl GatewayError {
    fn new(kind: GatewayErrorKind, message: impl Into<String>) -> Self {
        GatewayError { kind, message: message.into(), detail: None }
    }

    pub fn code(&self) -> &'static str {
        match self.kind {
            GatewayErrorKind::VisibilityViolation => "visibility-violation",
            GatewayErrorKind::ConsensusTimeout => "consensus-timeout",
            GatewayErrorKind::ConsensusError => "consensus-error",
            GatewayErrorKind::InvalidCall => "invalid-call",
        }
    }
}

pub type CallResult = Result<Value, GatewayError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DivergenceEvent {
    pub at: u64,
    pub what: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeStats {
    pub writes: u64,
    pub reads: u64,
    pub comparisons: u64,
    pub rechecks: u64,
    pub recoveries: u64,
    pub timers_fired: u64,
    pub delayed_launches: u64,
}

enum Pending {
    Write { call: Option<u64>, timer_item: Option<String> },
    Read { call: u64, query: ReadQuery, mode: ReadMode },
    /// Consensus side of a comparison.
    Check { check: u64 },
    Join { node: NodeId },
}

struct Check {
    query: ReadQuery,
    retries_left: u32,
    due: Option<u64>,
}

pub struct Node {
    id: NodeId,
    keys: KeyRing,
    settings: NodeSettings,
    replica: Replica,
    app: NodeApp,
    client: Client,
    pending: BTreeMap<u64, Pending>,
    completed: Vec<(u64, CallResult)>,
    out: Vec<(NodeId, Wire)>,
    checks: BTreeMap<u64, Check>,
    /// Write echoes waiting for the local block: (block hash, consensus result, retries left, due).
    echoes: Vec<(Digest, Option<OperationResult>, u32, u64)>,
    next_check: u64,
    timers_in_flight: BTreeSet<String>,
    launches: BTreeMap<(u64, u64), Operation>,
    launch_counter: u64,
    services: BTreeMap<String, String>,
    next_audit: Option<u64>,
    next_join: Option<u64>,
    joins_in_flight: BTreeSet<NodeId>,
    recovering: bool,
    divergences: Vec<DivergenceEvent>,
    stats: NodeStats,
    startup: StartupReport,
}

impl Node {
    /// Startup: load engine and chain (replaying local blocks), start the
    /// replica (restoring persisted consensus state), and, when the node has
    /// history or is not yet a member, ask the cluster for state.
    pub fn start(
        id: NodeId,
        keys: KeyRing,
        config: ViewConfig,
        settings: NodeSettings,
        disk: Disk,
        now: u64,
    ) -> Node {
        let had_history = disk.consensus().is_some() || !disk.chain.is_empty();
        let persisted = disk.consensus().cloned();
        let (mut app, startup) = NodeApp::open(id, disk, now);
        app.set_peer_limit(settings.block_peers.clone());
        let mut replica = match persisted {
            Some(p) => Replica::restore(id, keys.clone(), p, settings.consensus.clone(), &mut app),
            None => {
                let mut r = Replica::new(id, keys.clone(), config.clone(), settings.consensus.clone(), &mut app);
                if had_history || !config.is_member(id) {
                    r.request_state_on_start();
                }
                r
            }
        };
        // Blocks are only written for executed sequence numbers.
        if let Some(b) = app.chain().get(app.chain().height()) {
            replica.resume_after(b.seq);
        }
        app.set_peers(replica.config());
        let _ = replica.take_dirty();
        // Request ids must grow across restarts; the clock provides that.
        let client = Client::new(id, keys.clone(), settings.client.clone(), now * 1024 + 1);
        let next_audit = settings.audit_interval_ms.map(|ms| now + ms);
        let next_join = (!replica.config().is_member(id)).then_some(now);
        Node {
            id,
            keys,
            settings,
            replica,
            app,
            client,
            pending: BTreeMap::new(),
            completed: Vec::new(),
            out: Vec::new(),
            checks: BTreeMap::new(),
            echoes: Vec::new(),
            next_check: 1,
            timers_in_flight: BTreeSet::new(),
            launches: BTreeMap::new(),
            launch_counter: 0,
            services: BTreeMap::new(),
            next_audit,
            next_join,
            joins_in_flight: BTreeSet::new(),
            recovering: false,
            divergences: Vec::new(),
            stats: NodeStats::default(),
            startup,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ViewConfig {
        self.replica.config()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn app(&self) -> &NodeApp {
        &self.app
    }

    /// Direct access for fault injection and inspection.
    pub fn app_mut(&mut self) -> &mut NodeApp {
        &mut self.app
    }

    pub fn settings(&self) -> &NodeSettings {
        &self.settings
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn divergences(&self) -> &[DivergenceEvent] {
        &self.divergences
    }

    pub fn startup_report(&self) -> &StartupReport {
        &self.startup
    }

    pub fn is_recovering(&self) -> bool {
        self.recovering
    }

    /// Member, not transferring state, engine at the chain head.
    pub fn is_ready(&self) -> bool {
        self.replica.is_member()
            && self.replica.phase() != Phase::Transfer
            && !self.app.installing()
            && self.app.engine().last_block_hash() == self.app.chain().head().hash
    }

    pub fn status(&self) -> Value {
        let c = self.replica.config();
        json!({
            "node": self.id,
            "ready": self.is_ready(),
            "recovering": self.recovering,
            "view": c.view,
            "leader": c.leader(),
            "members": c.members,
            "f": c.f,
            "phase": self.replica.phase(),
            "executed": self.replica.last_executed(),
            "head": self.app.chain().head(),
            "engineDigest": self.app.engine().digest(),
        })
    }

    pub fn take_completed(&mut self) -> Vec<(u64, CallResult)> {
        std::mem::take(&mut self.completed)
    }

    pub fn drain(&mut self) -> Vec<(NodeId, Wire)> {
        std::mem::take(&mut self.out)
    }

    // ----- calls -----

    pub fn handle_call(&mut self, call_id: u64, call: Call, now: u64) {
        let class = classify(call.name()).expect("every call name is classified");
        match (class.locality, call) {
            (Locality::Global, Call::Write { op }) => self.write(Some(call_id), op, now),
            (Locality::Global, Call::Read { query, mode }) => {
                self.read(call_id, query, mode.unwrap_or(self.settings.read_mode), now)
            }
            (_, Call::ScheduleLaunch { spec_id, version, case_data, delay_ms }) => {
                let due = now + delay_ms;
                self.launch_counter += 1;
                let op = Operation::DelayedLaunchFire { spec_id, version, case_data, delay_ms };
                self.launches.insert((due, self.launch_counter), op);
                self.completed.push((call_id, Ok(json!({ "scheduled": true, "due": due }))));
            }
            (_, Call::RegisterService { name, url }) => {
                self.services.insert(name.clone(), url);
                self.completed.push((call_id, Ok(json!({ "registered": name }))));
            }
            (_, Call::RetrieveServices) => self.completed.push((call_id, Ok(json!(self.services)))),
            (_, Call::NodeStatus) => self.completed.push((call_id, Ok(self.status()))),
            (_, other) => self.completed.push((
                call_id,
                Err(GatewayError::new(GatewayErrorKind::InvalidCall, format!("{} misrouted", other.name()))),
            )),
        }
        self.flush(now);
    }

    fn write(&mut self, call: Option<u64>, op: Operation, now: u64) {
        if let Some(item) = op.work_item() {
            if let Some(owner) = self.app.engine().assignment_of(item) {
                if owner != self.id {
                    let err = GatewayError::new(
                        GatewayErrorKind::VisibilityViolation,
                        format!("work item {item} is assigned to node {owner}"),
                    );
                    if let Some(c) = call {
                        self.completed.push((c, Err(err)));
                    }
                    return;
                }
            }
        }
        let timer_item = match &op {
            Operation::TimerExpiry { work_item_id, .. } => Some(work_item_id.clone()),
            _ => None,
        };
        self.stats.writes += 1;
        let rid = self.submit_op(op, now);
        self.pending.insert(rid, Pending::Write { call, timer_item });
    }

    fn submit_op(&mut self, op: Operation, now: u64) -> u64 {
        let wop = WorkflowOperation::new(op, self.id, String::new());
        self.submit_wop(wop, now)
    }

    fn submit_wop(&mut self, mut wop: WorkflowOperation, now: u64) -> u64 {
        let config = self.replica.config().clone();
        // The ordering client picks the id; the operation names it.
        let peek = self.client_next_id();
        if wop.client_request_id.is_empty() {
            wop.client_request_id = format!("{}-{peek}", self.id);
        }
        let body = RequestBody::App { payload: GatewayRequest::Write(wop).to_bytes() };
        self.client.submit(Mode::Ordered, body, &config, now)
    }

    fn client_next_id(&self) -> u64 {
        self.client.peek_next_id()
    }

    /// Orders an operation without the local visibility check, the way a
    /// faulty node would. For fault injection.
    pub fn submit_unchecked(&mut self, call: Option<u64>, wop: WorkflowOperation, now: u64) {
        let rid = self.submit_wop(wop, now);
        self.pending.insert(rid, Pending::Write { call, timer_item: None });
        self.flush(now);
    }

    fn read(&mut self, call: u64, query: ReadQuery, mode: ReadMode, now: u64) {
        self.stats.reads += 1;
        match mode {
            ReadMode::LocalBypass => {
                let answer = self.app.engine().query_with_times(&query);
                self.completed.push((call, query_to_result(answer)));
                if self.settings.fault_policy == FaultPolicy::FailEarly {
                    self.start_check(query, now);
                }
            }
            ReadMode::UnorderedConsensus | ReadMode::OrderedConsensus => {
                let rid = self.submit_read(&query, mode, now);
                self.pending.insert(rid, Pending::Read { call, query, mode });
            }
        }
    }

    fn submit_read(&mut self, query: &ReadQuery, mode: ReadMode, now: u64) -> u64 {
        let config = self.replica.config().clone();
        let body = RequestBody::App { payload: GatewayRequest::Read(query.clone()).to_bytes() };
        let m = if mode == ReadMode::OrderedConsensus { Mode::Ordered } else { Mode::Unordered };
        self.client.submit(m, body, &config, now)
    }

    fn start_check(&mut self, query: ReadQuery, now: u64) {
        let id = self.next_check;
        self.next_check += 1;
        self.checks.insert(id, Check { query: query.clone(), retries_left: self.settings.recheck_attempts, due: None });
        let rid = self.submit_read(&query, ReadMode::UnorderedConsensus, now);
        self.pending.insert(rid, Pending::Check { check: id });
    }

    // ----- replies -----

    fn on_client_event(&mut self, ev: ClientEvent, now: u64) {
        let (rid, bytes) = match ev {
            ClientEvent::Done { id, result } => (id, Some(result)),
            ClientEvent::TimedOut { id } => (id, None),
        };
        let Some(p) = self.pending.remove(&rid) else { return };
        match p {
            Pending::Write { call, timer_item } => {
                if let Some(item) = timer_item {
                    self.timers_in_flight.remove(&item);
                }
                let r = match bytes {
                    None => Err(GatewayError::new(GatewayErrorKind::ConsensusTimeout, "no reply quorum")),
                    Some(b) => self.finish_write(&b, now),
                };
                if let Some(c) = call {
                    self.completed.push((c, r));
                }
            }
            Pending::Read { call, query, mode } => {
                let r = match bytes {
                    None => Err(GatewayError::new(GatewayErrorKind::ConsensusTimeout, "no reply quorum")),
                    Some(b) => match wire::parse_reply::<ReadReply>(&b) {
                        None => Err(GatewayError::new(GatewayErrorKind::InvalidCall, "unreadable reply")),
                        Some(reply) => {
                            if self.settings.fault_policy == FaultPolicy::FailEarly {
                                self.compare_read(&query, &reply.result, mode, reply.last_block_hash, now);
                            }
                            let mut r = query_to_result(reply.result);
                            if let Ok(v) = &mut r {
                                self.app.engine().attach_times(v);
                            }
                            r
                        }
                    },
                };
                self.completed.push((call, r));
            }
            Pending::Check { check } => match bytes.and_then(|b| wire::parse_reply::<ReadReply>(&b)) {
                Some(reply) => self.settle_check(check, &reply.result, now),
                None => {
                    self.checks.remove(&check);
                }
            },
            Pending::Join { node } => {
                self.joins_in_flight.remove(&node);
            }
        }
    }

    fn finish_write(&mut self, bytes: &[u8], now: u64) -> CallResult {
        let Some(reply) = wire::parse_reply::<WriteReply>(bytes) else {
            return Err(GatewayError::new(GatewayErrorKind::InvalidCall, "unreadable reply"));
        };
        if self.settings.fault_policy == FaultPolicy::FailEarly {
            let due = now + self.settings.recheck_interval_ms;
            self.echoes.push((reply.last_block_hash, reply.result.clone(), self.settings.recheck_attempts, due));
            self.check_echoes(now, false);
        }
        match reply.result {
            Some(OperationResult::Ok(entity)) => {
                let mut v = serde_json::to_value(&entity).expect("entity serializes");
                self.app.engine().attach_times(&mut v);
                Ok(json!({ "result": v, "lastBlockHash": reply.last_block_hash }))
            }
            Some(OperationResult::Error(e)) => Err(GatewayError {
                kind: GatewayErrorKind::ConsensusError,
                message: e.to_string(),
                detail: Some(json!({ "code": e.code, "lastBlockHash": reply.last_block_hash })),
            }),
            None => Ok(json!({ "result": null, "lastBlockHash": reply.last_block_hash })),
        }
    }

    /// Compares the result this node computed for a block with the
    /// consensus result. A block not yet present locally is re-checked.
    fn check_echoes(&mut self, now: u64, timer: bool) {
        let mut keep = Vec::new();
        for (hash, consensus, retries, due) in std::mem::take(&mut self.echoes) {
            if timer && now < due {
                keep.push((hash, consensus, retries, due));
                continue;
            }
            let local = self.app.chain().by_hash(&hash).map(|b| b.height);
            match local {
                Some(h) => {
                    self.stats.comparisons += 1;
                    let mine = self.app.result_at(h);
                    if consensus.is_some() && mine.is_some() && mine != consensus.as_ref() {
                        self.diverged(now, format!("write result at block {h} differs from consensus"));
                        return;
                    }
                }
                None if retries > 0 => {
                    if timer {
                        self.stats.rechecks += 1;
                    }
                    let next = now + self.settings.recheck_interval_ms;
                    keep.push((hash, consensus, if timer { retries - 1 } else { retries }, next));
                }
                None => {
                    // Absent after the re-checks: lagging is fine, a broken chain is not.
                    if !self.app.chain().verify().is_ok() {
                        self.diverged(now, "local chain fails verification".into());
                        return;
                    }
                }
            }
        }
        self.echoes.extend(keep);
    }

    fn compare_read(&mut self, query: &ReadQuery, consensus: &QueryResult, mode: ReadMode, at: Option<Digest>, now: u64) {
        self.stats.comparisons += 1;
        let local = self.app.engine().query(query);
        let same_point = at.is_none_or(|h| h == self.app.engine().last_block_hash());
        if local == *consensus && same_point {
            return;
        }
        if mode == ReadMode::OrderedConsensus && !same_point {
            // Different heights: compare again against a fresh answer.
            self.start_check(query.clone(), now);
            return;
        }
        if local != *consensus {
            let id = self.next_check;
            self.next_check += 1;
            let due = Some(now + self.settings.recheck_interval_ms);
            self.checks.insert(id, Check { query: query.clone(), retries_left: self.settings.recheck_attempts, due });
        }
    }

    fn settle_check(&mut self, check: u64, consensus: &QueryResult, now: u64) {
        let Some(c) = self.checks.get_mut(&check) else { return };
        self.stats.comparisons += 1;
        if self.app.engine().query(&c.query) == *consensus {
            self.checks.remove(&check);
            return;
        }
        if c.retries_left == 0 {
            let what = format!("local answer to {:?} differs from consensus", c.query);
            self.checks.remove(&check);
            self.diverged(now, what);
            return;
        }
        c.due = Some(now + self.settings.recheck_interval_ms);
    }

    fn diverged(&mut self, now: u64, what: String) {
        if self.recovering {
            return;
        }
        self.divergences.push(DivergenceEvent { at: now, what });
        if self.settings.fault_policy == FaultPolicy::FailEarly {
            self.recover(now);
        }
    }

    /// Deletes chain, engine database and consensus state, then rejoins as
    /// a fresh node through state transfer.
    pub fn recover(&mut self, now: u64) {
        self.stats.recoveries += 1;
        self.recovering = true;
        self.checks.clear();
        self.echoes.clear();
        self.timers_in_flight.clear();
        self.app.wipe();
        let config = self.replica.config().clone();
        let mut r = Replica::new(self.id, self.keys.clone(), config, self.settings.consensus.clone(), &mut self.app);
        r.request_state_on_start();
        self.replica = r;
        self.app.set_peers(self.replica.config());
        self.flush(now);
    }

    // ----- network and time -----

    pub fn handle_network(&mut self, from: NodeId, wire: Wire, now: u64) {
        match wire {
            Wire::Consensus(ConsensusMessage::Reply { id, result, .. }) => {
                let config = self.replica.config().clone();
                if let Some(ev) = self.client.on_reply(from, id, result, &config) {
                    self.on_client_event(ev, now);
                }
            }
            Wire::Consensus(m) => self.replica.handle(from, m, now, &mut self.app),
            Wire::Join { node, operator_tag } => self.on_join(node, operator_tag, now),
            other => self.app.on_peer(from, other, now),
        }
        self.flush(now);
    }

    fn on_join(&mut self, node: NodeId, operator_tag: Digest, now: u64) {
        if !self.replica.is_member() || self.replica.config().is_member(node) || self.joins_in_flight.contains(&node) {
            return;
        }
        let config = self.replica.config().clone();
        let body = RequestBody::Reconfig { change: ConfigChange::Join { node }, operator_tag };
        let rid = self.client.submit(Mode::Ordered, body, &config, now);
        self.joins_in_flight.insert(node);
        self.pending.insert(rid, Pending::Join { node });
    }

    pub fn next_deadline(&self) -> Option<u64> {
        let mut d: Vec<u64> = Vec::new();
        d.extend(self.replica.next_deadline());
        d.extend(self.client.next_deadline());
        d.extend(self.app.next_deadline());
        if self.is_ready() {
            d.extend(self.app.engine().next_timer_deadline(self.id));
        }
        d.extend(self.launches.keys().next().map(|(t, _)| *t));
        d.extend(self.checks.values().filter_map(|c| c.due));
        d.extend(self.echoes.iter().map(|e| e.3));
        d.extend(self.next_audit);
        d.extend(self.next_join);
        d.into_iter().min()
    }

    pub fn tick(&mut self, now: u64) {
        self.replica.tick(now, &mut self.app);
        self.app.tick(now);
        let config = self.replica.config().clone();
        for ev in self.client.tick(now, &config) {
            self.on_client_event(ev, now);
        }
        if self.is_ready() {
            for ev in self.app.engine().schedule_timers(self.id, now) {
                if self.timers_in_flight.insert(ev.work_item_id.clone()) {
                    self.stats.timers_fired += 1;
                    self.write(None, ev.into_operation(), now);
                }
            }
        }
        while let Some(entry) = self.launches.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let op = entry.remove();
            self.stats.delayed_launches += 1;
            self.write(None, op, now);
        }
        let due: Vec<u64> = self.checks.iter().filter(|(_, c)| c.due.is_some_and(|d| d <= now)).map(|(k, _)| *k).collect();
        for id in due {
            let c = self.checks.get_mut(&id).expect("listed");
            c.due = None;
            c.retries_left -= 1;
            let q = c.query.clone();
            self.stats.rechecks += 1;
            let rid = self.submit_read(&q, ReadMode::UnorderedConsensus, now);
            self.pending.insert(rid, Pending::Check { check: id });
        }
        self.check_echoes(now, true);
        if let (Some(at), Some(every)) = (self.next_audit, self.settings.audit_interval_ms) {
            if now >= at {
                self.next_audit = Some(now + every);
                if self.is_ready() {
                    self.audit(now);
                }
            }
        }
        if let Some(at) = self.next_join {
            if now >= at {
                if self.replica.is_member() {
                    self.next_join = None;
                } else {
                    self.next_join = Some(now + self.settings.join_retry_ms);
                    self.send_join();
                }
            }
        }
        self.flush(now);
    }

    /// Self-audit: a node cannot notice its own faults while it only
    /// receives blocks, so it periodically checks its chain and compares its
    /// engine digest with the cluster's.
    fn audit(&mut self, now: u64) {
        if !self.app.chain().verify().is_ok() {
            self.diverged(now, "local chain fails verification".into());
            return;
        }
        self.start_check(ReadQuery::EngineDigest, now);
    }

    fn send_join(&mut self) {
        let Some(key) = self.settings.consensus.operator_key else { return };
        let tag = crate::ordering::operator_tag(&key, &ConfigChange::Join { node: self.id });
        let members = self.replica.config().members.clone();
        for m in members {
            self.out.push((m, Wire::Join { node: self.id, operator_tag: tag }));
        }
    }

    /// Moves messages between the local replica and client, hands the rest
    /// to the host, and finishes installs.
    fn flush(&mut self, now: u64) {
        loop {
            let mut progressed = false;
            if let Some(ok) = self.app.take_install_result() {
                self.replica.app_ready(ok, now, &mut self.app);
                progressed = true;
            }
            let mut msgs = self.client.drain();
            msgs.extend(self.replica.drain());
            for (to, m) in msgs {
                progressed = true;
                if to != self.id {
                    self.out.push((to, Wire::Consensus(m)));
                    continue;
                }
                match m {
                    ConsensusMessage::Reply { id, result, .. } => {
                        let config = self.replica.config().clone();
                        if let Some(ev) = self.client.on_reply(self.id, id, result, &config) {
                            self.on_client_event(ev, now);
                        }
                    }
                    other => self.replica.handle(self.id, other, now, &mut self.app),
                }
            }
            if !progressed {
                break;
            }
        }
        self.out.extend(self.app.drain());
        if self.replica.take_dirty() {
            self.app.set_peers(self.replica.config());
            let state = self.replica.persistent();
            if let Err(e) = self.app.disk_mut().save_consensus(&state) {
                eprintln!("node {}: cannot save consensus state: {e}", self.id);
            }
        }
        if self.recovering && self.is_ready() {
            self.recovering = false;
        }
    }

    /// Persists the engine; call before a clean shutdown.
    pub fn shutdown(mut self) -> Disk {
        self.app.persist_engine();
        let state = self.replica.persistent();
        let _ = self.app.disk_mut().save_consensus(&state);
        self.app.into_disk()
    }

    /// Chain verification from the head, as the monitor and CLI report it.
    pub fn verify_chain(&self) -> Verification {
        self.app.chain().verify()
    }

    pub fn canonical_status(&self) -> Vec<u8> {
        canonical::value_bytes(&self.status())
    }
}

fn query_to_result(q: QueryResult) -> CallResult {
    match q {
        QueryResult::Ok(v) => Ok(v),
        QueryResult::Error(e) => Err(GatewayError {
            kind: GatewayErrorKind::ConsensusError,
            message: e.to_string(),
            detail: Some(json!({ "code": e.code })),
        }),
    }
}

#[cfg(test)]
mod tests;
