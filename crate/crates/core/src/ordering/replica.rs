use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{self, Key, KeyRing};
use crate::canonical;
use crate::digest::Digest;
use crate::model::NodeId;

use super::config::{ConfigChange, ViewConfig};
use super::messages::{CheckpointState, ConsensusMessage, LogEntry, Mode, PreparedEntry, Request, RequestBody};

/// Executed request ids kept per client for duplicate suppression.
pub const ID_WINDOW: u64 = 4096;
const REPLY_CACHE: usize = 4096;
const FUTURE_BUFFER: usize = 20_000;

#[derive(Clone, Debug)]
pub struct Settings {
    pub checkpoint_interval: u64,
    pub window: u64,
    pub view_change_ms: u64,
    pub status_ms: u64,
    pub stuck_ms: u64,
    pub transfer_retry_ms: u64,
    /// Key that authorizes reconfiguration requests.
    pub operator_key: Option<Key>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            checkpoint_interval: 64,
            window: 256,
            view_change_ms: 500,
            status_ms: 500,
            stuck_ms: 1000,
            transfer_retry_ms: 1000,
            operator_key: None,
        }
    }
}

/// Tag an operator attaches to a reconfiguration request.
pub fn operator_tag(key: &Key, change: &ConfigChange) -> Digest {
    auth::mac(key, &canonical::to_bytes(change))
}

/// The replicated service on top of the ordering layer.
pub trait Application {
    /// Executes an ordered request at sequence number `seq`. Called exactly
    /// once per sequence number, in order, for `RequestBody::App` requests.
    fn execute(&mut self, seq: u64, request: &Request, now: u64) -> Vec<u8>;
    /// Answers a request outside the total order. Must not change state.
    fn execute_unordered(&mut self, request: &Request, now: u64) -> Vec<u8>;
    /// Snapshot description included in the checkpoint at `seq`.
    fn checkpoint(&mut self, seq: u64) -> Value;
    /// Starts bringing the application to `state`. Returns `true` when it is
    /// already there; otherwise the owner calls [`Replica::app_ready`] later.
    fn install(&mut self, seq: u64, state: &Value, now: u64) -> bool;
    fn reconfigured(&mut self, _config: &ViewConfig) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "camelCase")]
pub enum Phase {
    Normal,
    ViewChange { target: u64 },
    Transfer,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    view: u64,
    digest: Option<Digest>,
    prepares: BTreeMap<NodeId, Digest>,
    commits: BTreeMap<NodeId, Digest>,
    sent_prepare: bool,
    sent_commit: bool,
    prepared: bool,
    committed: bool,
}

impl Slot {
    fn new(view: u64) -> Self {
        Slot { view, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
struct ViewChangeVote {
    stable: u64,
    prepared: Vec<PreparedEntry>,
}

#[derive(Clone, Debug)]
struct Transfer {
    replies: BTreeMap<NodeId, (u64, Vec<CheckpointState>, Vec<LogEntry>)>,
    deadline: u64,
    /// Entries to replay and view to adopt once the application caught up.
    awaiting_app: Option<(Vec<LogEntry>, u64)>,
    /// A checkpoint was adopted but the application never confirmed it, so
    /// `last_executed` runs ahead of the application.
    app_behind: bool,
}

/// What survives a restart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PersistentState {
    pub config: ViewConfig,
    pub stable: CheckpointState,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplicaStats {
    pub view_changes_started: u64,
    pub views_installed: u64,
    pub transfers: u64,
    pub checkpoints_stable: u64,
}

pub struct Replica {
    id: NodeId,
    keys: KeyRing,
    settings: Settings,
    config: ViewConfig,
    phase: Phase,

    log: BTreeMap<u64, Slot>,
    /// Highest view in which each sequence number prepared here.
    prepared_cert: BTreeMap<u64, (u64, Digest)>,
    requests: BTreeMap<Digest, Request>,
    /// Ordered requests known but not executed, with arrival time.
    pending: BTreeMap<Digest, u64>,
    queue: VecDeque<Digest>,
    /// Digests with a slot in the current view.
    assigned: BTreeSet<Digest>,
    next_seq: u64,
    last_executed: u64,
    history: BTreeMap<u64, Digest>,
    executed_log: Vec<(u64, Digest)>,

    executed_ids: BTreeMap<NodeId, BTreeSet<u64>>,
    reply_cache: BTreeMap<(NodeId, u64), Vec<u8>>,
    reply_order: VecDeque<(NodeId, u64)>,

    stable: CheckpointState,
    /// Stable checkpoints still served to others (at most two).
    retained: BTreeMap<u64, CheckpointState>,
    own_checkpoints: BTreeMap<u64, CheckpointState>,
    checkpoint_votes: BTreeMap<u64, BTreeMap<NodeId, Digest>>,

    view_changes: BTreeMap<u64, BTreeMap<NodeId, ViewChangeVote>>,
    new_view_sent: BTreeSet<u64>,
    pending_new_view: BTreeMap<u64, (Vec<NodeId>, Vec<(u64, Digest)>)>,
    vc_timeout: u64,
    vc_deadline: Option<u64>,
    request_deadline: Option<u64>,
    future: Vec<(NodeId, ConsensusMessage)>,

    peer_status: BTreeMap<NodeId, (u64, u64)>,
    next_status: u64,
    last_progress: u64,
    transfer: Option<Transfer>,
    start_transfer_pending: bool,

    stats: ReplicaStats,
    dirty: bool,
    out: Vec<(NodeId, ConsensusMessage)>,
}

impl Replica {
    pub fn new(id: NodeId, keys: KeyRing, config: ViewConfig, settings: Settings, app: &mut dyn Application) -> Self {
        let genesis = CheckpointState {
            seq: 0,
            members: config.members.clone(),
            f: config.f,
            epoch: config.epoch,
            app: app.checkpoint(0),
            executed: BTreeMap::new(),
        };
        let vc = settings.view_change_ms;
        Replica {
            id,
            keys,
            config,
            phase: Phase::Normal,
            log: BTreeMap::new(),
            prepared_cert: BTreeMap::new(),
            requests: BTreeMap::new(),
            pending: BTreeMap::new(),
            queue: VecDeque::new(),
            assigned: BTreeSet::new(),
            next_seq: 1,
            last_executed: 0,
            history: BTreeMap::new(),
            executed_log: Vec::new(),
            executed_ids: BTreeMap::new(),
            reply_cache: BTreeMap::new(),
            reply_order: VecDeque::new(),
            retained: [(0, genesis.clone())].into(),
            stable: genesis,
            own_checkpoints: BTreeMap::new(),
            checkpoint_votes: BTreeMap::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            pending_new_view: BTreeMap::new(),
            vc_timeout: vc,
            vc_deadline: None,
            request_deadline: None,
            future: Vec::new(),
            peer_status: BTreeMap::new(),
            next_status: 0,
            last_progress: 0,
            transfer: None,
            start_transfer_pending: false,
            stats: ReplicaStats::default(),
            dirty: true,
            out: Vec::new(),
            settings,
        }
    }

    /// Resumes from persisted state. The replica fetches whatever it missed
    /// through state transfer on its first tick.
    pub fn restore(
        id: NodeId,
        keys: KeyRing,
        persisted: PersistentState,
        settings: Settings,
        app: &mut dyn Application,
    ) -> Self {
        let mut r = Replica::new(id, keys, persisted.config.clone(), settings, app);
        let s = persisted.stable;
        r.last_executed = s.seq;
        r.next_seq = s.seq + 1;
        r.executed_ids = s.executed.iter().map(|(c, ids)| (*c, ids.iter().copied().collect())).collect();
        r.retained = [(s.seq, s.clone())].into();
        r.stable = s;
        r.start_transfer_pending = true;
        r
    }

    /// The application durably holds the effects of everything up to `seq`,
    /// past the last stable checkpoint. Sequence numbers at or below it are
    /// never assigned or executed again; the log entries themselves are
    /// gone, so laggards below it wait for the next stable checkpoint.
    pub fn resume_after(&mut self, seq: u64) {
        if seq > self.last_executed {
            self.last_executed = seq;
            self.next_seq = self.next_seq.max(seq + 1);
        }
    }

    /// Makes a fresh replica ask the cluster for state on its first tick
    /// (joining or recovering nodes).
    pub fn request_state_on_start(&mut self) {
        self.start_transfer_pending = true;
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ViewConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn last_executed(&self) -> u64 {
        self.last_executed
    }

    pub fn stable_checkpoint(&self) -> &CheckpointState {
        &self.stable
    }

    pub fn executed_log(&self) -> &[(u64, Digest)] {
        &self.executed_log
    }

    pub fn stats(&self) -> &ReplicaStats {
        &self.stats
    }

    /// Sequence numbers that prepared here, with view and digest.
    pub fn prepared(&self) -> &BTreeMap<u64, (u64, Digest)> {
        &self.prepared_cert
    }

    pub fn persistent(&self) -> PersistentState {
        PersistentState { config: self.config.clone(), stable: self.stable.clone() }
    }

    /// True once since the last call if persistent state changed.
    pub fn take_dirty(&mut self) -> bool {
        std::mem::take(&mut self.dirty)
    }

    /// Outgoing messages. Replies addressed to this replica's own id belong
    /// to the local client.
    pub fn drain(&mut self) -> Vec<(NodeId, ConsensusMessage)> {
        std::mem::take(&mut self.out)
    }

    pub fn is_member(&self) -> bool {
        self.config.is_member(self.id)
    }

    fn send(&mut self, to: NodeId, msg: ConsensusMessage) {
        if to != self.id {
            self.out.push((to, msg));
        }
    }

    fn broadcast(&mut self, msg: ConsensusMessage) {
        let members = self.config.members.clone();
        for m in members {
            self.send(m, msg.clone());
        }
    }

    fn low(&self) -> u64 {
        self.stable.seq
    }

    pub fn next_deadline(&self) -> Option<u64> {
        let mut d = vec![self.next_status];
        if self.start_transfer_pending {
            d.push(0);
        }
        match self.phase {
            Phase::Normal => {
                d.extend(self.request_deadline);
                if self.is_behind() {
                    d.push(self.last_progress + self.settings.stuck_ms);
                }
            }
            Phase::ViewChange { .. } => d.extend(self.vc_deadline),
            Phase::Transfer => d.extend(self.transfer.as_ref().map(|t| t.deadline)),
        }
        d.into_iter().min()
    }

    // ----- inbound -----

    pub fn handle(&mut self, from: NodeId, msg: ConsensusMessage, now: u64, app: &mut dyn Application) {
        if let Some(v) = msg.normal_view() {
            if v > self.config.view {
                if self.future.len() < FUTURE_BUFFER {
                    self.future.push((from, msg));
                }
                return;
            }
            if v < self.config.view || self.phase != Phase::Normal || !self.config.is_member(from) {
                return;
            }
        }
        match msg {
            ConsensusMessage::Request(req) => self.on_request(from, req, now, app),
            ConsensusMessage::PrePrepare { view, seq, digest } => self.on_pre_prepare(from, view, seq, digest, now, app),
            ConsensusMessage::Prepare { view, seq, digest } => self.on_prepare(from, view, seq, digest, now, app),
            ConsensusMessage::Commit { view, seq, digest } => self.on_commit(from, view, seq, digest, now, app),
            ConsensusMessage::Checkpoint { seq, digest } => self.on_checkpoint(from, seq, digest),
            ConsensusMessage::ViewChange { new_view, stable, prepared } => {
                self.on_view_change(from, new_view, stable, prepared, now, app)
            }
            ConsensusMessage::NewView { view, voters, proposals } => {
                self.on_new_view(from, view, voters, proposals, now, app)
            }
            ConsensusMessage::Status { view, executed } => {
                if self.config.is_member(from) {
                    self.peer_status.insert(from, (view, executed));
                }
            }
            ConsensusMessage::StateRequest { .. } => self.on_state_request(from),
            ConsensusMessage::StateReply { view, checkpoints, entries } => {
                self.on_state_reply(from, view, checkpoints, entries, now, app)
            }
            ConsensusMessage::Reply { .. } => {}
        }
    }

    fn was_executed(&self, client: NodeId, id: u64) -> bool {
        match self.executed_ids.get(&client) {
            Some(ids) => {
                ids.contains(&id) || ids.last().is_some_and(|max| id + ID_WINDOW <= *max)
            }
            None => false,
        }
    }

    fn on_request(&mut self, from: NodeId, req: Request, now: u64, app: &mut dyn Application) {
        if req.is_null() || (from != req.client && !req.verify_for(&self.keys)) {
            return;
        }
        if req.mode == Mode::Unordered {
            let result = app.execute_unordered(&req, now);
            let view = self.config.view;
            self.send_reply(req.client, view, req.id, result);
            return;
        }
        if self.was_executed(req.client, req.id) {
            if let Some(result) = self.reply_cache.get(&(req.client, req.id)).cloned() {
                let view = self.config.view;
                self.send_reply(req.client, view, req.id, result);
            }
            return;
        }
        let d = req.digest();
        self.requests.entry(d).or_insert(req);
        if !self.pending.contains_key(&d) {
            self.pending.insert(d, now);
            self.queue.push_back(d);
        }
        if self.request_deadline.is_none() && self.phase == Phase::Normal {
            self.request_deadline = Some(now + self.vc_timeout);
        }
        self.propose_pending();
        // Slots that were waiting for these bytes.
        let waiting: Vec<u64> = self
            .log
            .iter()
            .filter(|(_, s)| s.digest == Some(d) && !s.sent_prepare && s.view == self.config.view)
            .map(|(k, _)| *k)
            .collect();
        for seq in waiting {
            self.send_prepare(seq, d);
            self.check_slot(seq, now, app);
        }
    }

    fn send_reply(&mut self, client: NodeId, view: u64, id: u64, result: Vec<u8>) {
        if client == self.id {
            // Local client: delivered by the owner through the outbox too.
            self.out.push((client, ConsensusMessage::Reply { view, id, result }));
        } else {
            self.send(client, ConsensusMessage::Reply { view, id, result });
        }
    }

    fn propose_pending(&mut self) {
        if self.phase != Phase::Normal || self.config.leader() != self.id {
            return;
        }
        while self.next_seq <= self.low() + self.settings.window {
            let Some(d) = self.queue.pop_front() else { break };
            if !self.pending.contains_key(&d) || self.assigned.contains(&d) {
                continue;
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            let view = self.config.view;
            let slot = self.log.entry(seq).or_insert_with(|| Slot::new(view));
            slot.digest = Some(d);
            self.assigned.insert(d);
            self.broadcast(ConsensusMessage::PrePrepare { view, seq, digest: d });
            self.send_prepare(seq, d);
        }
    }

    fn send_prepare(&mut self, seq: u64, d: Digest) {
        let view = self.config.view;
        let slot = self.log.entry(seq).or_insert_with(|| Slot::new(view));
        if slot.sent_prepare {
            return;
        }
        slot.sent_prepare = true;
        self.broadcast(ConsensusMessage::Prepare { view, seq, digest: d });
    }

    fn in_window(&self, seq: u64) -> bool {
        seq > self.low() && seq <= self.low() + self.settings.window
    }

    fn on_pre_prepare(&mut self, from: NodeId, view: u64, seq: u64, d: Digest, now: u64, app: &mut dyn Application) {
        if from != self.config.leader() || !self.in_window(seq) {
            return;
        }
        let slot = self.log.entry(seq).or_insert_with(|| Slot::new(view));
        match slot.digest {
            Some(existing) if existing != d => return,
            Some(_) => {}
            None => slot.digest = Some(d),
        }
        self.assigned.insert(d);
        if self.requests.contains_key(&d) {
            self.send_prepare(seq, d);
        }
        self.check_slot(seq, now, app);
    }

    fn on_prepare(&mut self, from: NodeId, view: u64, seq: u64, d: Digest, now: u64, app: &mut dyn Application) {
        if !self.in_window(seq) {
            return;
        }
        self.log.entry(seq).or_insert_with(|| Slot::new(view)).prepares.insert(from, d);
        self.check_slot(seq, now, app);
    }

    fn on_commit(&mut self, from: NodeId, view: u64, seq: u64, d: Digest, now: u64, app: &mut dyn Application) {
        if !self.in_window(seq) {
            return;
        }
        self.log.entry(seq).or_insert_with(|| Slot::new(view)).commits.insert(from, d);
        self.check_slot(seq, now, app);
    }

    /// Advances a slot through prepared and committed.
    fn check_slot(&mut self, seq: u64, now: u64, app: &mut dyn Application) {
        let need = super::config::vote_threshold(self.config.f);
        let view = self.config.view;
        let Some(slot) = self.log.get_mut(&seq) else { return };
        let Some(d) = slot.digest else { return };
        if !slot.prepared && slot.sent_prepare {
            let votes = slot.prepares.iter().filter(|(n, v)| **n != self.id && **v == d).count();
            if votes >= need {
                slot.prepared = true;
                self.prepared_cert.insert(seq, (view, d));
            }
        }
        let slot = self.log.get_mut(&seq).expect("slot");
        if slot.prepared && !slot.sent_commit {
            slot.sent_commit = true;
            self.broadcast(ConsensusMessage::Commit { view, seq, digest: d });
        }
        let slot = self.log.get_mut(&seq).expect("slot");
        if slot.prepared && slot.sent_commit && !slot.committed {
            let votes = slot.commits.iter().filter(|(n, v)| **n != self.id && **v == d).count();
            if votes >= need {
                slot.committed = true;
                self.try_execute(now, app);
            }
        }
    }

    fn try_execute(&mut self, now: u64, app: &mut dyn Application) {
        while self.phase == Phase::Normal {
            let seq = self.last_executed + 1;
            let Some(slot) = self.log.get(&seq) else { break };
            if !slot.committed {
                break;
            }
            let d = slot.digest.expect("committed slot has a digest");
            let Some(req) = self.requests.get(&d).cloned() else { break };
            self.execute(seq, req, now, app);
        }
    }

    /// Executes `req` at `seq == last_executed + 1`.
    fn execute(&mut self, seq: u64, req: Request, now: u64, app: &mut dyn Application) {
        debug_assert_eq!(seq, self.last_executed + 1);
        let d = req.digest();
        self.last_executed = seq;
        self.last_progress = now;
        self.history.insert(seq, d);
        self.executed_log.push((seq, d));
        self.pending.remove(&d);
        self.requests.entry(d).or_insert_with(|| req.clone());
        let mut reconfigured = None;
        if !req.is_null() {
            let result = if self.was_executed(req.client, req.id) {
                self.reply_cache.get(&(req.client, req.id)).cloned()
            } else {
                let r = match &req.body {
                    RequestBody::App { .. } => app.execute(seq, &req, now),
                    RequestBody::Reconfig { change, operator_tag } => {
                        let (bytes, next) = self.reconfigure(*change, operator_tag);
                        reconfigured = next;
                        bytes
                    }
                    RequestBody::Null => Vec::new(),
                };
                self.record_executed(req.client, req.id, r.clone());
                Some(r)
            };
            if let Some(result) = result {
                let view = reconfigured.as_ref().map(|c: &ViewConfig| c.view).unwrap_or(self.config.view);
                self.send_reply(req.client, view, req.id, result);
            }
        }
        if let Some(next) = reconfigured {
            self.switch_config(next, seq, now, app);
        }
        if seq % self.settings.checkpoint_interval == 0 {
            self.take_checkpoint(seq, app);
        }
        self.request_deadline = if self.pending.is_empty() { None } else { Some(now + self.vc_timeout) };
    }

    fn record_executed(&mut self, client: NodeId, id: u64, result: Vec<u8>) {
        let ids = self.executed_ids.entry(client).or_default();
        ids.insert(id);
        let max = *ids.last().expect("just inserted");
        while let Some(min) = ids.first().copied() {
            if min + ID_WINDOW <= max {
                ids.remove(&min);
            } else {
                break;
            }
        }
        self.reply_cache.insert((client, id), result);
        self.reply_order.push_back((client, id));
        while self.reply_order.len() > REPLY_CACHE {
            if let Some(k) = self.reply_order.pop_front() {
                self.reply_cache.remove(&k);
            }
        }
    }

    fn reconfigure(&mut self, change: ConfigChange, tag: &Digest) -> (Vec<u8>, Option<ViewConfig>) {
        let authorized = self.settings.operator_key.is_some_and(|k| operator_tag(&k, &change) == *tag);
        if !authorized {
            let v = json!({"error": "unauthorized", "message": "reconfiguration needs the operator key"});
            return (canonical::value_bytes(&v), None);
        }
        match self.config.apply(change) {
            Ok(next) => {
                let v = json!({"ok": {"members": next.members, "f": next.f, "epoch": next.epoch}});
                (canonical::value_bytes(&v), Some(next))
            }
            Err(e) => {
                let v = json!({"error": "invalid-config", "message": e.to_string()});
                (canonical::value_bytes(&v), None)
            }
        }
    }

    /// Installs a new membership right after the sequence number that
    /// carried it. Uncommitted later slots are dropped; clients retransmit.
    fn switch_config(&mut self, next: ViewConfig, seq: u64, now: u64, app: &mut dyn Application) {
        self.config = next;
        self.log.retain(|s, _| *s <= seq);
        self.prepared_cert.retain(|s, _| *s <= seq);
        self.assigned.clear();
        self.next_seq = seq + 1;
        self.view_changes.retain(|v, _| *v > self.config.view);
        self.vc_timeout = self.settings.view_change_ms;
        self.vc_deadline = None;
        self.peer_status.clear();
        self.dirty = true;
        app.reconfigured(&self.config);
        self.queue = self.pending.keys().copied().collect();
        self.replay_future(now, app);
    }

    // ----- checkpoints -----

    fn take_checkpoint(&mut self, seq: u64, app: &mut dyn Application) {
        let state = CheckpointState {
            seq,
            members: self.config.members.clone(),
            f: self.config.f,
            epoch: self.config.epoch,
            app: app.checkpoint(seq),
            executed: self.executed_ids.iter().map(|(c, ids)| (*c, ids.iter().copied().collect())).collect(),
        };
        let digest = state.digest();
        self.own_checkpoints.insert(seq, state);
        self.checkpoint_votes.entry(seq).or_default().insert(self.id, digest);
        self.broadcast(ConsensusMessage::Checkpoint { seq, digest });
        self.check_stable(seq);
    }

    fn on_checkpoint(&mut self, from: NodeId, seq: u64, digest: Digest) {
        if seq <= self.low() || !self.config.is_member(from) {
            return;
        }
        self.checkpoint_votes.entry(seq).or_default().insert(from, digest);
        self.check_stable(seq);
    }

    fn check_stable(&mut self, seq: u64) {
        let Some(own) = self.own_checkpoints.get(&seq) else { return };
        let d = own.digest();
        let votes = self.checkpoint_votes.get(&seq).map_or(0, |v| v.values().filter(|x| **x == d).count());
        if votes < self.config.quorum() || seq <= self.low() {
            return;
        }
        let state = own.clone();
        self.retained.insert(seq, state.clone());
        while self.retained.len() > 2 {
            self.retained.pop_first();
        }
        self.stable = state;
        self.stats.checkpoints_stable += 1;
        self.dirty = true;
        self.log.retain(|s, _| *s > seq);
        self.prepared_cert.retain(|s, _| *s > seq);
        self.own_checkpoints.retain(|s, _| *s > seq);
        self.checkpoint_votes.retain(|s, _| *s > seq);
        let oldest = *self.retained.keys().next().expect("retained is non-empty");
        let drop: Vec<u64> = self.history.range(..=oldest).map(|(s, _)| *s).collect();
        for s in drop {
            if let Some(d) = self.history.remove(&s) {
                if !self.pending.contains_key(&d) {
                    self.requests.remove(&d);
                }
            }
        }
        self.propose_pending();
    }

    // ----- timers -----

    fn is_behind(&self) -> bool {
        let ahead = self.peer_status.values().filter(|(_, e)| *e > self.last_executed).count();
        let newer_view = self.peer_status.values().filter(|(v, _)| *v > self.config.view).count();
        ahead >= self.config.weak() || newer_view >= self.config.weak()
    }

    pub fn tick(&mut self, now: u64, app: &mut dyn Application) {
        if self.start_transfer_pending {
            self.start_transfer_pending = false;
            self.last_progress = now;
            self.start_transfer(now);
        }
        if now >= self.next_status {
            self.next_status = now + self.settings.status_ms;
            if self.is_member() {
                let msg = ConsensusMessage::Status { view: self.config.view, executed: self.last_executed };
                self.broadcast(msg);
            }
        }
        match self.phase {
            Phase::Normal => {
                if self.is_behind() && now >= self.last_progress + self.settings.stuck_ms {
                    self.start_transfer(now);
                } else if self.request_deadline.is_some_and(|d| now >= d) {
                    self.request_deadline = None;
                    if self.is_behind() {
                        self.start_transfer(now);
                    } else if self.is_member() {
                        let target = self.config.view + 1;
                        self.start_view_change(target, now, app);
                    }
                }
            }
            Phase::ViewChange { target } => {
                if self.vc_deadline.is_some_and(|d| now >= d) {
                    if self.is_behind() && now >= self.last_progress + self.settings.stuck_ms {
                        self.start_transfer(now);
                    } else {
                        self.start_view_change(target + 1, now, app);
                    }
                }
            }
            Phase::Transfer => {
                if let Some(t) = &mut self.transfer {
                    if now >= t.deadline && t.awaiting_app.is_none() {
                        t.deadline = now + self.settings.transfer_retry_ms;
                        self.send_state_requests();
                    }
                }
            }
        }
    }

    // ----- view change -----

    fn start_view_change(&mut self, target: u64, now: u64, app: &mut dyn Application) {
        if target <= self.config.view {
            return;
        }
        if let Phase::ViewChange { target: t } = self.phase {
            if t >= target {
                return;
            }
        }
        self.phase = Phase::ViewChange { target };
        self.stats.view_changes_started += 1;
        let stable = self.low();
        let prepared: Vec<PreparedEntry> = self
            .prepared_cert
            .iter()
            .filter(|(s, _)| **s > stable)
            .filter_map(|(s, (v, d))| {
                self.requests.get(d).map(|r| PreparedEntry { seq: *s, view: *v, request: r.clone() })
            })
            .collect();
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.id, ViewChangeVote { stable, prepared: prepared.clone() });
        self.broadcast(ConsensusMessage::ViewChange { new_view: target, stable, prepared });
        self.vc_deadline = Some(now + self.vc_timeout);
        self.vc_timeout = self.vc_timeout.saturating_mul(2);
        self.request_deadline = None;
        self.maybe_send_new_view(target, now, app);
        self.maybe_install_pending_new_view(now, app);
    }

    fn on_view_change(
        &mut self,
        from: NodeId,
        new_view: u64,
        stable: u64,
        prepared: Vec<PreparedEntry>,
        now: u64,
        app: &mut dyn Application,
    ) {
        if new_view <= self.config.view || !self.config.is_member(from) {
            return;
        }
        let valid: Vec<PreparedEntry> = prepared
            .into_iter()
            .filter(|e| e.seq > stable && (e.request.verify_for(&self.keys) || self.requests.contains_key(&e.request.digest())))
            .collect();
        self.view_changes.entry(new_view).or_default().insert(from, ViewChangeVote { stable, prepared: valid });

        // Join once f+1 members want a newer view than ours.
        let current_target = match self.phase {
            Phase::ViewChange { target } => target,
            _ => self.config.view,
        };
        let mut latest: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (v, votes) in self.view_changes.range(current_target + 1..) {
            for n in votes.keys() {
                if *n != self.id {
                    latest.insert(*n, *v);
                }
            }
        }
        if latest.len() >= self.config.weak() && self.phase != Phase::Transfer {
            let target = *latest.values().min().expect("non-empty");
            self.start_view_change(target, now, app);
        }
        self.maybe_send_new_view(new_view, now, app);
        self.maybe_install_pending_new_view(now, app);
    }

    fn maybe_send_new_view(&mut self, view: u64, now: u64, app: &mut dyn Application) {
        if self.config.leader_of(view) != self.id
            || self.phase != (Phase::ViewChange { target: view })
            || self.new_view_sent.contains(&view)
        {
            return;
        }
        let Some(votes) = self.view_changes.get(&view) else { return };
        if votes.len() < self.config.quorum() {
            return;
        }
        let voters: Vec<NodeId> = votes.keys().copied().take(self.config.quorum()).collect();
        let (min_s, proposals, requests) = select_proposals(&voters, votes);
        self.new_view_sent.insert(view);
        self.broadcast(ConsensusMessage::NewView { view, voters, proposals: proposals.clone() });
        self.install_view(view, min_s, proposals, requests, now, app);
    }

    fn on_new_view(
        &mut self,
        from: NodeId,
        view: u64,
        voters: Vec<NodeId>,
        proposals: Vec<(u64, Digest)>,
        now: u64,
        app: &mut dyn Application,
    ) {
        if view <= self.config.view || from != self.config.leader_of(view) {
            return;
        }
        let distinct: BTreeSet<NodeId> = voters.iter().copied().collect();
        if distinct.len() < self.config.quorum() || !distinct.iter().all(|v| self.config.is_member(*v)) {
            return;
        }
        self.pending_new_view.insert(view, (voters, proposals));
        self.maybe_install_pending_new_view(now, app);
    }

    /// Installs a buffered NewView once every listed ViewChange arrived here
    /// and the leader's proposals match what those votes imply.
    fn maybe_install_pending_new_view(&mut self, now: u64, app: &mut dyn Application) {
        let candidates: Vec<u64> = self.pending_new_view.keys().copied().collect();
        for view in candidates.into_iter().rev() {
            if view <= self.config.view {
                self.pending_new_view.remove(&view);
                continue;
            }
            let (voters, proposals) = self.pending_new_view[&view].clone();
            let Some(votes) = self.view_changes.get(&view) else { continue };
            if !voters.iter().all(|v| votes.contains_key(v)) {
                continue;
            }
            let (min_s, expected, requests) = select_proposals(&voters, votes);
            self.pending_new_view.remove(&view);
            if expected != proposals {
                continue;
            }
            if self.phase == Phase::Transfer {
                continue;
            }
            self.install_view(view, min_s, proposals, requests, now, app);
            return;
        }
    }

    fn install_view(
        &mut self,
        view: u64,
        min_s: u64,
        proposals: Vec<(u64, Digest)>,
        requests: Vec<Request>,
        now: u64,
        app: &mut dyn Application,
    ) {
        self.config.view = view;
        self.phase = Phase::Normal;
        self.stats.views_installed += 1;
        self.vc_timeout = self.settings.view_change_ms;
        self.vc_deadline = None;
        self.dirty = true;
        self.view_changes.retain(|v, _| *v > view);
        self.pending_new_view.retain(|v, _| *v > view);
        self.peer_status.clear();
        for r in requests {
            self.requests.entry(r.digest()).or_insert(r);
        }
        self.log.clear();
        self.assigned.clear();
        let max_p = proposals.last().map(|(s, _)| *s).unwrap_or(0);
        for (seq, d) in &proposals {
            let slot = self.log.entry(*seq).or_insert_with(|| Slot::new(view));
            slot.digest = Some(*d);
            self.assigned.insert(*d);
        }
        self.next_seq = min_s.max(max_p).max(self.last_executed) + 1;
        for (seq, d) in proposals {
            if self.in_window(seq) && self.requests.contains_key(&d) {
                self.send_prepare(seq, d);
            }
        }
        self.queue = self.pending.keys().copied().collect();
        self.request_deadline = if self.pending.is_empty() { None } else { Some(now + self.vc_timeout) };
        self.last_progress = now;
        if min_s > self.last_executed {
            self.start_transfer(now);
            return;
        }
        self.replay_future(now, app);
        self.propose_pending();
        let seqs: Vec<u64> = self.log.keys().copied().collect();
        for s in seqs {
            self.check_slot(s, now, app);
        }
    }

    fn replay_future(&mut self, now: u64, app: &mut dyn Application) {
        let view = self.config.view;
        let (now_msgs, later): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.future).into_iter().partition(|(_, m)| m.normal_view() == Some(view));
        self.future = later.into_iter().filter(|(_, m)| m.normal_view().is_some_and(|v| v > view)).collect();
        for (from, m) in now_msgs {
            self.handle(from, m, now, app);
        }
    }

    // ----- state transfer -----

    fn start_transfer(&mut self, now: u64) {
        self.phase = Phase::Transfer;
        self.stats.transfers += 1;
        self.transfer = Some(Transfer {
            replies: BTreeMap::new(),
            deadline: now + self.settings.transfer_retry_ms,
            awaiting_app: None,
            app_behind: false,
        });
        self.request_deadline = None;
        self.vc_deadline = None;
        self.send_state_requests();
    }

    fn send_state_requests(&mut self) {
        let have = self.last_executed;
        self.broadcast(ConsensusMessage::StateRequest { have });
    }

    fn on_state_request(&mut self, from: NodeId) {
        let checkpoints: Vec<CheckpointState> = self.retained.values().cloned().collect();
        let oldest = checkpoints.first().map_or(0, |c| c.seq);
        let entries: Vec<LogEntry> = self
            .history
            .range(oldest + 1..)
            .filter_map(|(s, d)| self.requests.get(d).map(|r| LogEntry { seq: *s, request: r.clone() }))
            .collect();
        let view = self.config.view;
        self.send(from, ConsensusMessage::StateReply { view, checkpoints, entries });
    }

    fn on_state_reply(
        &mut self,
        from: NodeId,
        view: u64,
        checkpoints: Vec<CheckpointState>,
        entries: Vec<LogEntry>,
        now: u64,
        app: &mut dyn Application,
    ) {
        let Some(t) = &mut self.transfer else { return };
        if t.awaiting_app.is_some() || from == self.id {
            return;
        }
        t.replies.insert(from, (view, checkpoints, entries));
        self.try_finish_transfer(now, app);
    }

    fn try_finish_transfer(&mut self, now: u64, app: &mut dyn Application) {
        let Some(t) = &self.transfer else { return };
        let f = self.config.f;
        let quorum = 2 * f as usize + 1;
        if t.replies.len() < quorum {
            return;
        }
        // Highest checkpoint attested by 2f+1 providers.
        let mut attest: BTreeMap<(u64, Digest), (BTreeSet<NodeId>, CheckpointState)> = BTreeMap::new();
        for (p, (_, cps, _)) in &t.replies {
            for c in cps {
                let e = attest.entry((c.seq, c.digest())).or_insert_with(|| (BTreeSet::new(), c.clone()));
                e.0.insert(*p);
            }
        }
        let chosen = attest
            .iter()
            .rev()
            .find(|(_, (who, c))| who.len() >= quorum.max(2 * c.f as usize + 1))
            .map(|(_, (_, c))| c.clone());
        let Some(cp) = chosen else { return };
        let app_behind = t.app_behind;
        if app_behind && cp.seq < self.last_executed {
            // Nothing at or above the checkpoint we owe the application yet.
            return;
        }

        let mut views: Vec<u64> = t.replies.values().map(|(v, _, _)| *v).collect();
        views.sort_unstable_by(|a, b| b.cmp(a));
        let weak = (cp.f.max(f)) as usize + 1;
        let adopted_view = views.get(weak - 1).copied().unwrap_or(0);

        let base = cp.seq.max(self.last_executed);
        let mut agreed = Vec::new();
        let mut seq = base + 1;
        loop {
            let mut by_digest: BTreeMap<Digest, (usize, Request)> = BTreeMap::new();
            for (_, _, es) in t.replies.values() {
                if let Some(e) = es.iter().find(|e| e.seq == seq) {
                    let d = e.request.digest();
                    by_digest.entry(d).or_insert((0, e.request.clone())).0 += 1;
                }
            }
            match by_digest.into_values().find(|(n, _)| *n >= weak) {
                Some((_, request)) => agreed.push(LogEntry { seq, request }),
                None => break,
            }
            seq += 1;
        }

        if cp.seq > self.last_executed || (app_behind && cp.seq == self.last_executed) {
            self.adopt_checkpoint(&cp);
            if !app.install(cp.seq, &cp.app, now) {
                if let Some(t) = &mut self.transfer {
                    t.awaiting_app = Some((agreed, adopted_view));
                    t.app_behind = true;
                }
                return;
            }
        }
        self.finish_transfer(agreed, adopted_view, now, app);
    }

    fn adopt_checkpoint(&mut self, cp: &CheckpointState) {
        self.config = cp.config(self.config.view);
        self.last_executed = cp.seq;
        self.executed_ids = cp.executed.iter().map(|(c, ids)| (*c, ids.iter().copied().collect())).collect();
        self.reply_cache.clear();
        self.reply_order.clear();
        self.history.clear();
        self.log.clear();
        self.prepared_cert.clear();
        self.own_checkpoints.clear();
        self.checkpoint_votes.retain(|s, _| *s > cp.seq);
        self.retained = [(cp.seq, cp.clone())].into();
        self.stable = cp.clone();
        self.dirty = true;
    }

    /// Called by the owner once the application reached the state handed to
    /// [`Application::install`]. `ok == false` restarts the transfer.
    pub fn app_ready(&mut self, ok: bool, now: u64, app: &mut dyn Application) {
        let Some(t) = &mut self.transfer else { return };
        let Some((entries, view)) = t.awaiting_app.take() else { return };
        if !ok {
            t.app_behind = true;
            t.replies.clear();
            t.deadline = now;
            return;
        }
        self.finish_transfer(entries, view, now, app);
    }

    pub fn awaiting_app(&self) -> bool {
        self.transfer.as_ref().is_some_and(|t| t.awaiting_app.is_some())
    }

    fn finish_transfer(&mut self, entries: Vec<LogEntry>, view: u64, now: u64, app: &mut dyn Application) {
        self.transfer = None;
        self.phase = Phase::Normal;
        for e in entries {
            if e.seq == self.last_executed + 1 {
                self.execute(e.seq, e.request, now, app);
            }
        }
        if view > self.config.view {
            self.config.view = view;
            self.log.retain(|s, _| *s <= self.last_executed);
            self.dirty = true;
        }
        let low = self.low();
        self.log.retain(|s, _| *s > low);
        self.assigned.clear();
        self.next_seq = self.next_seq.max(self.last_executed + 1);
        self.vc_timeout = self.settings.view_change_ms;
        self.vc_deadline = None;
        self.view_changes.retain(|v, _| *v > self.config.view);
        self.peer_status.clear();
        self.last_progress = now;
        self.queue = self.pending.keys().copied().collect();
        self.request_deadline = if self.pending.is_empty() { None } else { Some(now + self.vc_timeout) };
        self.replay_future(now, app);
        self.propose_pending();
        self.try_execute(now, app);
    }
}

/// Picks, for every sequence number above the highest stable checkpoint in
/// the votes, the request prepared in the highest view (null if none).
fn select_proposals(
    voters: &[NodeId],
    votes: &BTreeMap<NodeId, ViewChangeVote>,
) -> (u64, Vec<(u64, Digest)>, Vec<Request>) {
    let chosen: Vec<&ViewChangeVote> = voters.iter().filter_map(|v| votes.get(v)).collect();
    let min_s = chosen.iter().map(|v| v.stable).max().unwrap_or(0);
    let mut best: BTreeMap<u64, (u64, Digest, &Request)> = BTreeMap::new();
    for vote in &chosen {
        for e in &vote.prepared {
            if e.seq <= min_s {
                continue;
            }
            let d = e.request.digest();
            let replace = match best.get(&e.seq) {
                None => true,
                Some((v, bd, _)) => e.view > *v || (e.view == *v && d < *bd),
            };
            if replace {
                best.insert(e.seq, (e.view, d, &e.request));
            }
        }
    }
    let max_s = best.keys().next_back().copied().unwrap_or(min_s);
    let mut proposals = Vec::new();
    let mut requests = Vec::new();
    for seq in min_s + 1..=max_s {
        match best.get(&seq) {
            Some((_, d, r)) => {
                proposals.push((seq, *d));
                requests.push((*r).clone());
            }
            None => {
                let null = Request::null(seq);
                proposals.push((seq, null.digest()));
                requests.push(null);
            }
        }
    }
    (min_s, proposals, requests)
}
