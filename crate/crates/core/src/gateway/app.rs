//! The replicated application: block creation plus engine execution.
//!
//! Invariant outside of an install: the engine has applied exactly the
//! blocks in the chain (`engine.applied_count() == chain.height()` and the
//! hashes agree).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blockstore::{Block, CatchUp, CatchUpStatus, PeerMessage, Verification, GENESIS, MAX_BLOCKS_PER_SEND};
use crate::digest::Digest;
use crate::engine::{Announcement, BlockRef, Engine, EngineState, OperationResult, QueryResult, WorkflowOperation};
use crate::model::NodeId;
use crate::ordering::{Application, Request, RequestBody, ViewConfig};

use super::disk::Disk;
use super::wire::{reply_bytes, GatewayRequest, ReadReply, Wire, WriteReply};

const RESULTS_KEPT: usize = 4096;
const ANNOUNCEMENTS_KEPT: usize = 1024;
const SNAPSHOTS_KEPT: usize = 3;
/// Below this many missing blocks the engine replays instead of fetching a snapshot.
pub const SNAPSHOT_MIN_BLOCKS: u64 = 16;
const REQUEST_EVERY_MS: u64 = 300;
const SNAPSHOT_ASKS_PER_PEER: usize = 2;

/// What a checkpoint attests about the application.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppCheckpoint {
    pub head: BlockRef,
    pub engine: Digest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppStats {
    pub blocks_created: u64,
    pub blocks_fetched: u64,
    pub blocks_replayed: u64,
    pub snapshots_installed: u64,
    pub already_applied: u64,
    pub installs: u64,
}

/// What startup found on disk.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartupReport {
    pub chain_height: u64,
    /// Height the chain was cut back to after failing verification.
    pub truncated_to: Option<u64>,
    pub engine_loaded_at: u64,
    pub replayed: u64,
}

struct Install {
    seq: u64,
    target: AppCheckpoint,
    catchup: Option<CatchUp>,
    need_snapshot: bool,
    snapshot: Option<EngineState>,
    next_request: u64,
    rr: usize,
    snapshot_asks: usize,
}

pub struct NodeApp {
    id: NodeId,
    engine: Engine,
    disk: Disk,
    results: BTreeMap<u64, OperationResult>,
    announcements: VecDeque<Announcement>,
    snapshots: BTreeMap<u64, EngineState>,
    install: Option<Install>,
    install_result: Option<bool>,
    peers: Vec<NodeId>,
    /// Block-exchange neighbours; all members when unset.
    peer_limit: Option<Vec<NodeId>>,
    flagged: BTreeSet<NodeId>,
    peer_out: Vec<(NodeId, Wire)>,
    /// Fault injection: serve tampered snapshots.
    pub corrupt_snapshots: bool,
    stats: AppStats,
}

impl NodeApp {
    /// Loads engine and chain, repairs what does not verify and replays the
    /// blocks the engine has not seen.
    pub fn open(id: NodeId, mut disk: Disk, now: u64) -> (Self, StartupReport) {
        let mut report = StartupReport::default();
        if let Verification::Broken { height } = disk.chain.verify() {
            let keep = height.saturating_sub(1);
            disk.chain.truncate(keep).expect("truncate chain");
            report.truncated_to = Some(keep);
        } else if !disk.chain.verify().is_ok() {
            disk.chain.truncate(0).expect("truncate chain");
            report.truncated_to = Some(0);
        }
        let engine = disk.engine().and_then(|b| Engine::from_snapshot(b).ok()).unwrap_or_default();
        let mut app = NodeApp {
            id,
            engine,
            disk,
            results: BTreeMap::new(),
            announcements: VecDeque::new(),
            snapshots: BTreeMap::new(),
            install: None,
            install_result: None,
            peers: Vec::new(),
            peer_limit: None,
            flagged: BTreeSet::new(),
            peer_out: Vec::new(),
            corrupt_snapshots: false,
            stats: AppStats::default(),
        };
        if !app.engine_matches_chain_prefix() {
            app.engine = Engine::new();
        }
        report.engine_loaded_at = app.engine.applied_count();
        report.replayed = app.replay_local(now);
        report.chain_height = app.disk.chain.height();
        (app, report)
    }

    fn engine_matches_chain_prefix(&self) -> bool {
        let h = self.engine.applied_count();
        let expected = if h == 0 { Some(Digest::ZERO) } else { self.disk.chain.get(h).map(|b| b.hash) };
        h <= self.disk.chain.height() && expected == Some(self.engine.last_block_hash())
    }

    /// Applies chain blocks above the engine's position.
    fn replay_local(&mut self, now: u64) -> u64 {
        let from = self.engine.applied_count() + 1;
        let blocks: Vec<Block> = (from..=self.disk.chain.height()).filter_map(|h| self.disk.chain.get(h).cloned()).collect();
        for b in &blocks {
            self.apply_block(b, now);
        }
        self.stats.blocks_replayed += blocks.len() as u64;
        blocks.len() as u64
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn disk(&self) -> &Disk {
        &self.disk
    }

    pub fn disk_mut(&mut self) -> &mut Disk {
        &mut self.disk
    }

    pub fn into_disk(self) -> Disk {
        self.disk
    }

    pub fn chain(&self) -> &crate::blockstore::ChainStore {
        &self.disk.chain
    }

    pub fn stats(&self) -> &AppStats {
        &self.stats
    }

    pub fn flagged(&self) -> &BTreeSet<NodeId> {
        &self.flagged
    }

    pub fn installing(&self) -> bool {
        self.install.is_some()
    }

    /// Result this node computed for the block at `height`, if still cached.
    pub fn result_at(&self, height: u64) -> Option<&OperationResult> {
        self.results.get(&height)
    }

    pub fn announcements(&self) -> impl Iterator<Item = &Announcement> {
        self.announcements.iter()
    }

    pub fn set_peers(&mut self, config: &ViewConfig) {
        let others = config.members.iter().copied().filter(|m| *m != self.id);
        let limited: Vec<NodeId> = match &self.peer_limit {
            Some(l) => others.clone().filter(|m| l.contains(m)).collect(),
            None => Vec::new(),
        };
        // A limit that excludes every current member would strand the node.
        self.peers = if limited.is_empty() { others.collect() } else { limited };
    }

    #[cfg(test)]
    pub(crate) fn forget_snapshots(&mut self) {
        self.snapshots.clear();
    }

    pub fn set_peer_limit(&mut self, peers: Option<Vec<NodeId>>) {
        self.peer_limit = peers;
    }

    pub fn take_install_result(&mut self) -> Option<bool> {
        self.install_result.take()
    }

    pub fn drain(&mut self) -> Vec<(NodeId, Wire)> {
        std::mem::take(&mut self.peer_out)
    }

    /// Saves the engine so a restart replays only later blocks.
    pub fn persist_engine(&mut self) {
        if let Err(e) = self.disk.save_engine(self.engine.to_snapshot()) {
            eprintln!("node {}: cannot save engine: {e}", self.id);
        }
    }

    /// Drops chain, engine and caches. The caller rebuilds the replica.
    pub fn wipe(&mut self) {
        self.disk.wipe().expect("wipe data directory");
        self.engine = Engine::new();
        self.results.clear();
        self.snapshots.clear();
        self.install = None;
        self.install_result = None;
        self.flagged.clear();
    }

    fn apply_block(&mut self, b: &Block, now: u64) -> OperationResult {
        let applied = match WorkflowOperation::from_bytes(&b.payload) {
            Ok(mut wop) => {
                // The authenticated submitter, not the claim inside the payload.
                wop.origin_node = b.origin;
                self.engine.apply(&wop, b.reference(), now)
            }
            Err(_) => self.engine.apply_malformed(b.reference()),
        };
        for a in applied.announcements {
            if a.relevant_to(self.id) {
                self.announcements.push_back(a);
            }
        }
        while self.announcements.len() > ANNOUNCEMENTS_KEPT {
            self.announcements.pop_front();
        }
        self.results.insert(b.height, applied.result.clone());
        while self.results.len() > RESULTS_KEPT {
            self.results.pop_first();
        }
        applied.result
    }

    fn order_write(&mut self, seq: u64, payload: Vec<u8>, origin: NodeId, now: u64) -> Vec<u8> {
        if let Some(b) = self.disk.chain.by_seq(seq) {
            if b.payload == payload && b.origin == origin {
                self.stats.already_applied += 1;
                let reply = WriteReply { result: self.results.get(&b.height).cloned(), last_block_hash: b.hash };
                return reply_bytes(&reply);
            }
            // Our chain disagrees with the agreed order from here on.
            let keep = b.height - 1;
            self.disk.chain.truncate(keep).expect("truncate chain");
            if self.engine.applied_count() > keep {
                self.engine = Engine::new();
                self.replay_local(now);
            }
        }
        let height = self.disk.chain.height() + 1;
        let block = self.disk.chain.append_ordered(height, seq, payload, origin).expect("append block").clone();
        self.stats.blocks_created += 1;
        let result = self.apply_block(&block, now);
        reply_bytes(&WriteReply { result: Some(result), last_block_hash: block.hash })
    }

    // ----- install / catch-up -----

    pub fn on_peer(&mut self, from: NodeId, wire: Wire, now: u64) {
        match wire {
            Wire::Blocks(PeerMessage::BlockSend { blocks }) => {
                let Some(inst) = &mut self.install else { return };
                let Some(cu) = &mut inst.catchup else { return };
                self.stats.blocks_fetched += blocks.len() as u64;
                for f in cu.offer(from, blocks) {
                    self.flagged.insert(f);
                }
                self.progress(now);
            }
            Wire::Blocks(req) => {
                if let Some(reply) = self.disk.chain.serve_peer(&req) {
                    self.peer_out.push((from, Wire::Blocks(reply)));
                }
            }
            Wire::SnapshotRequest { seq } => {
                if let Some(s) = self.snapshots.get(&seq) {
                    let mut state = s.clone();
                    if self.corrupt_snapshots {
                        state.applied_count += 1;
                    }
                    self.peer_out.push((from, Wire::SnapshotSend { seq, state: Box::new(state) }));
                }
            }
            Wire::SnapshotSend { seq, state } => {
                let Some(inst) = &mut self.install else { return };
                if inst.seq != seq || inst.snapshot.is_some() || !inst.need_snapshot {
                    return;
                }
                if state.digest() == inst.target.engine {
                    inst.snapshot = Some(*state);
                    self.progress(now);
                } else {
                    self.flagged.insert(from);
                    inst.next_request = now;
                }
            }
            Wire::Consensus(_) | Wire::Join { .. } => {}
        }
    }

    fn progress(&mut self, now: u64) {
        let Some(inst) = &mut self.install else { return };
        if let Some(cu) = &inst.catchup {
            match cu.status() {
                CatchUpStatus::InProgress => return,
                CatchUpStatus::BaseMismatch => {
                    // Our chain is wrong below the point we trusted; start over.
                    self.disk.chain.wipe().expect("wipe chain");
                    self.engine = Engine::new();
                    inst.catchup = Some(CatchUp::new(GENESIS, inst.target.head));
                    inst.need_snapshot = inst.target.head.height > SNAPSHOT_MIN_BLOCKS;
                    inst.next_request = now;
                    return;
                }
                CatchUpStatus::Complete => {
                    let cu = inst.catchup.take().expect("checked");
                    for b in cu.into_blocks() {
                        self.disk.chain.append_verified(b).expect("append verified block");
                    }
                    if !inst.need_snapshot {
                        self.replay_local(now);
                    }
                }
            }
        }
        let Some(inst) = &mut self.install else { return };
        if inst.need_snapshot && inst.snapshot.is_none() {
            return;
        }
        let inst = self.install.take().expect("present");
        if let Some(state) = inst.snapshot {
            self.engine = Engine::from_state(state, now);
            self.results.clear();
            self.stats.snapshots_installed += 1;
        }
        let ok = self.disk.chain.head() == inst.target.head && self.engine.digest() == inst.target.engine;
        if ok {
            self.persist_engine();
            self.install_result = Some(true);
        } else if !inst.need_snapshot {
            // Replay disagreed with the attested state: fetch the state instead.
            self.install = Some(Install { need_snapshot: true, snapshot: None, next_request: now, ..inst });
        } else {
            self.install_result = Some(false);
        }
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.install.as_ref().map(|i| i.next_request)
    }

    pub fn tick(&mut self, now: u64) {
        let peers: Vec<NodeId> = self.peers.iter().copied().filter(|p| !self.flagged.contains(p)).collect();
        let peers = if peers.is_empty() { self.peers.clone() } else { peers };
        let Some(inst) = &mut self.install else { return };
        if now < inst.next_request || peers.is_empty() {
            return;
        }
        inst.next_request = now + REQUEST_EVERY_MS;
        if let Some(cu) = &inst.catchup {
            for (from, count) in cu.wanted(MAX_BLOCKS_PER_SEND).into_iter().take(4) {
                let p = peers[inst.rr % peers.len()];
                inst.rr += 1;
                self.peer_out.push((p, Wire::Blocks(PeerMessage::BlockRequest { from, count })));
            }
        }
        if inst.need_snapshot && inst.snapshot.is_none() {
            // Peers keep only a few snapshots; if nobody still has this one,
            // report failure so the replica picks a newer checkpoint.
            if inst.snapshot_asks >= SNAPSHOT_ASKS_PER_PEER * peers.len() {
                self.install = None;
                self.install_result = Some(false);
                return;
            }
            inst.snapshot_asks += 1;
            let p = peers[inst.rr % peers.len()];
            inst.rr += 1;
            self.peer_out.push((p, Wire::SnapshotRequest { seq: inst.seq }));
        }
    }
}

impl Application for NodeApp {
    fn execute(&mut self, seq: u64, request: &Request, now: u64) -> Vec<u8> {
        let RequestBody::App { payload } = &request.body else { return Vec::new() };
        match GatewayRequest::parse(payload) {
            Some(GatewayRequest::Write(wop)) => self.order_write(seq, wop.canonical_bytes(), request.client, now),
            Some(GatewayRequest::Read(q)) => reply_bytes(&ReadReply {
                result: self.engine.query(&q),
                last_block_hash: Some(self.engine.last_block_hash()),
            }),
            // Ordered but meaningless: still goes on chain.
            None => self.order_write(seq, payload.clone(), request.client, now),
        }
    }

    fn execute_unordered(&mut self, request: &Request, _now: u64) -> Vec<u8> {
        let result = match &request.body {
            RequestBody::App { payload } => match GatewayRequest::parse(payload) {
                Some(GatewayRequest::Read(q)) => self.engine.query(&q),
                _ => QueryResult::Error(crate::engine::EngineError::new(
                    crate::engine::ErrorCode::MalformedOperation,
                    "only reads may bypass ordering",
                )),
            },
            _ => return Vec::new(),
        };
        reply_bytes(&ReadReply { result, last_block_hash: None })
    }

    fn checkpoint(&mut self, seq: u64) -> Value {
        if seq > 0 {
            self.snapshots.insert(seq, self.engine.state().clone());
            while self.snapshots.len() > SNAPSHOTS_KEPT {
                self.snapshots.pop_first();
            }
            self.persist_engine();
        }
        json!(AppCheckpoint { head: self.disk.chain.head(), engine: self.engine.digest() })
    }

    fn install(&mut self, seq: u64, state: &Value, now: u64) -> bool {
        let Ok(target) = serde_json::from_value::<AppCheckpoint>(state.clone()) else { return false };
        self.stats.installs += 1;
        self.install = None;
        self.install_result = None;
        if self.disk.chain.head() == target.head && self.engine.digest() == target.engine {
            return true;
        }
        // Keep the verified part of the local chain that fits under the target.
        match self.disk.chain.verify() {
            Verification::Ok { .. } => {}
            Verification::Broken { height } => self.disk.chain.truncate(height.saturating_sub(1)).expect("truncate"),
            Verification::Missing { .. } => self.disk.chain.truncate(0).expect("truncate"),
        }
        if self.disk.chain.height() >= target.head.height {
            let fits = target.head.height == 0 || self.disk.chain.get(target.head.height).map(|b| b.hash) == Some(target.head.hash);
            self.disk.chain.truncate(if fits { target.head.height } else { 0 }).expect("truncate");
        }
        if !self.engine_matches_chain_prefix() {
            self.engine = Engine::new();
        }
        let missing = target.head.height - self.engine.applied_count();
        let need_snapshot = missing > SNAPSHOT_MIN_BLOCKS;
        if !need_snapshot {
            self.replay_local(now);
        }
        let catchup = (self.disk.chain.height() < target.head.height)
            .then(|| CatchUp::new(self.disk.chain.head(), target.head));
        self.install = Some(Install { seq, target, catchup, need_snapshot, snapshot: None, next_request: now, rr: 0, snapshot_asks: 0 });
        self.progress(now);
        match self.install_result.take() {
            Some(true) => true,
            other => {
                self.install_result = other;
                false
            }
        }
    }

    fn reconfigured(&mut self, config: &ViewConfig) {
        self.set_peers(config);
    }
}
