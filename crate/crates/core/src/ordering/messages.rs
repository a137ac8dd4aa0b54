use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::auth::KeyRing;
use crate::blockstore::hex_bytes;
use crate::canonical;
use crate::digest::Digest;
use crate::model::NodeId;

use super::config::{ConfigChange, ViewConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Mode {
    Ordered,
    Unordered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum RequestBody {
    /// Opaque application payload.
    App {
        #[serde(with = "hex_bytes")]
        payload: Vec<u8>,
    },
    /// Membership change; `operator_tag` is HMAC(operator key, canonical change).
    Reconfig { change: ConfigChange, operator_tag: Digest },
    /// Fills a sequence number nobody proposed anything for during a view change.
    Null,
}

/// A client request. `auth` holds one tag per replica over the request
/// digest, so replicas can accept the request when another replica relays it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Request {
    pub client: NodeId,
    pub id: u64,
    pub mode: Mode,
    pub body: RequestBody,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", with = "crate::canonical::pairs")]
    pub auth: BTreeMap<NodeId, Digest>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Unsigned<'a> {
    client: NodeId,
    id: u64,
    mode: Mode,
    body: &'a RequestBody,
}

impl Request {
    pub fn new(client: NodeId, id: u64, mode: Mode, body: RequestBody) -> Self {
        Request { client, id, mode, body, auth: BTreeMap::new() }
    }

    /// The request a view change uses to fill sequence number `seq`.
    pub fn null(seq: u64) -> Self {
        Request::new(NodeId(u32::MAX), seq, Mode::Ordered, RequestBody::Null)
    }

    pub fn is_null(&self) -> bool {
        matches!(self.body, RequestBody::Null)
    }

    /// Digest over everything but the authenticators.
    pub fn digest(&self) -> Digest {
        Digest::of(&canonical::to_bytes(&Unsigned {
            client: self.client,
            id: self.id,
            mode: self.mode,
            body: &self.body,
        }))
    }

    /// Adds a tag for every member.
    pub fn sign(&mut self, keys: &KeyRing, members: &[NodeId]) {
        let d = self.digest();
        self.auth = members.iter().filter_map(|m| keys.tag(*m, &d.0).map(|t| (*m, t))).collect();
    }

    /// The tag addressed to `keys.own()` verifies. Null requests need none.
    pub fn verify_for(&self, keys: &KeyRing) -> bool {
        if self.is_null() {
            return self.client == NodeId(u32::MAX);
        }
        match self.auth.get(&keys.own()) {
            Some(tag) => keys.verify(self.client, &self.digest().0, tag),
            None => false,
        }
    }
}

/// A request some replica saw prepared, carried in a view change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PreparedEntry {
    pub seq: u64,
    pub view: u64,
    pub request: Request,
}

/// One executed sequence number, as sent during state transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEntry {
    pub seq: u64,
    pub request: Request,
}

/// Everything a replica needs to resume from a checkpoint. The view is not
/// part of it: replicas at the same sequence number may sit in different views.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointState {
    pub seq: u64,
    pub members: Vec<NodeId>,
    pub f: u32,
    pub epoch: u64,
    /// Application snapshot (block head, engine digest, ...).
    pub app: Value,
    /// Recently executed request ids per client, for duplicate suppression.
    #[serde(with = "crate::canonical::pairs")]
    pub executed: BTreeMap<NodeId, Vec<u64>>,
}

impl CheckpointState {
    pub fn digest(&self) -> Digest {
        Digest::of(&canonical::to_bytes(self))
    }

    pub fn config(&self, view: u64) -> ViewConfig {
        ViewConfig { view, members: self.members.clone(), f: self.f, epoch: self.epoch }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ConsensusMessage {
    Request(Request),
    PrePrepare {
        view: u64,
        seq: u64,
        digest: Digest,
    },
    Prepare {
        view: u64,
        seq: u64,
        digest: Digest,
    },
    Commit {
        view: u64,
        seq: u64,
        digest: Digest,
    },
    Reply {
        view: u64,
        id: u64,
        #[serde(with = "hex_bytes")]
        result: Vec<u8>,
    },
    Checkpoint {
        seq: u64,
        digest: Digest,
    },
    ViewChange {
        new_view: u64,
        stable: u64,
        prepared: Vec<PreparedEntry>,
    },
    NewView {
        view: u64,
        voters: Vec<NodeId>,
        proposals: Vec<(u64, Digest)>,
    },
    /// Periodic progress report; lets a replica notice it fell behind.
    Status {
        view: u64,
        executed: u64,
    },
    StateRequest {
        have: u64,
    },
    StateReply {
        view: u64,
        checkpoints: Vec<CheckpointState>,
        entries: Vec<LogEntry>,
    },
}

impl ConsensusMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ConsensusMessage::Request(_) => "request",
            ConsensusMessage::PrePrepare { .. } => "pre-prepare",
            ConsensusMessage::Prepare { .. } => "prepare",
            ConsensusMessage::Commit { .. } => "commit",
            ConsensusMessage::Reply { .. } => "reply",
            ConsensusMessage::Checkpoint { .. } => "checkpoint",
            ConsensusMessage::ViewChange { .. } => "view-change",
            ConsensusMessage::NewView { .. } => "new-view",
            ConsensusMessage::Status { .. } => "status",
            ConsensusMessage::StateRequest { .. } => "state-request",
            ConsensusMessage::StateReply { .. } => "state-reply",
        }
    }

    /// The view a normal-case message belongs to.
    pub fn normal_view(&self) -> Option<u64> {
        match self {
            ConsensusMessage::PrePrepare { view, .. }
            | ConsensusMessage::Prepare { view, .. }
            | ConsensusMessage::Commit { view, .. } => Some(*view),
            _ => None,
        }
    }
}
