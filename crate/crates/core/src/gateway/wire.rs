use serde::{Deserialize, Serialize};

use crate::auth::KeyRing;
use crate::blockstore::PeerMessage;
use crate::canonical;
use crate::digest::Digest;
use crate::engine::{EngineState, OperationResult, QueryResult, ReadQuery, WorkflowOperation};
use crate::model::NodeId;
use crate::ordering::ConsensusMessage;

/// Everything nodes send each other.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "channel", content = "body", rename_all = "camelCase")]
pub enum Wire {
    Consensus(ConsensusMessage),
    Blocks(PeerMessage),
    SnapshotRequest { seq: u64 },
    SnapshotSend { seq: u64, state: Box<EngineState> },
    /// Asks a member to order this node's admission.
    Join { node: NodeId, operator_tag: Digest },
}

impl Wire {
    pub fn kind(&self) -> &'static str {
        match self {
            Wire::Consensus(m) => m.kind(),
            Wire::Blocks(_) => "blocks",
            Wire::SnapshotRequest { .. } => "snapshot-request",
            Wire::SnapshotSend { .. } => "snapshot-send",
            Wire::Join { .. } => "join",
        }
    }
}

/// A [`Wire`] message with its sender and a tag under the pair key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub body: Wire,
    pub tag: Digest,
}

#[derive(Serialize)]
struct Tagged<'a> {
    from: NodeId,
    to: NodeId,
    body: &'a Wire,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("envelope addressed to {0}")]
    WrongRecipient(NodeId),
    #[error("bad tag from {0}")]
    BadTag(NodeId),
}

impl Envelope {
    pub fn seal(keys: &KeyRing, to: NodeId, body: Wire) -> Option<Envelope> {
        let from = keys.own();
        let tag = keys.tag(to, &canonical::to_bytes(&Tagged { from, to, body: &body }))?;
        Some(Envelope { from, to, body, tag })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    /// Parses and authenticates an envelope received by `keys.own()`.
    pub fn open(keys: &KeyRing, bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
        if env.to != keys.own() {
            return Err(EnvelopeError::WrongRecipient(env.to));
        }
        let signed = canonical::to_bytes(&Tagged { from: env.from, to: env.to, body: &env.body });
        if !keys.verify(env.from, &signed, &env.tag) {
            return Err(EnvelopeError::BadTag(env.from));
        }
        Ok(env)
    }
}

/// Payload of an application request handed to the ordering layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call", content = "arg", rename_all = "camelCase")]
pub enum GatewayRequest {
    Write(WorkflowOperation),
    Read(ReadQuery),
}

impl GatewayRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_bytes(self)
    }

    pub fn parse(bytes: &[u8]) -> Option<GatewayRequest> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Reply to an ordered write. `already_applied` marks replies from a node
/// that found the block in its chain after a restart and has no result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WriteReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<OperationResult>,
    pub last_block_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReadReply {
    pub result: QueryResult,
    /// Present for ordered reads only; unordered answers come from replicas
    /// at different heights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_block_hash: Option<Digest>,
}

pub fn reply_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    canonical::to_bytes(v)
}

pub fn parse_reply<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Option<T> {
    serde_json::from_slice(bytes).ok()
}
