//! The local hash chain: one workflow operation per block.
//!
//! Blocks are linked by height. A block also records the consensus sequence
//! number that ordered its operation; reads, reconfigurations and null
//! requests consume sequence numbers without producing blocks, so the two
//! numbers drift apart.

mod catchup;
mod log;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::engine::BlockRef;
use crate::model::NodeId;

pub use catchup::{CatchUp, CatchUpStatus};
pub use log::{decode_log, encode_header, encode_record, LogError, LoadedLog, HEADER_MAGIC, LOG_VERSION};

/// Largest number of blocks answered in one `BlockSend`.
pub const MAX_BLOCKS_PER_SEND: u32 = 128;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub seq: u64,
    pub prev: Digest,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub origin: NodeId,
    pub hash: Digest,
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Block(h={} seq={} origin={} prev={} hash={} {}B)",
            self.height,
            self.seq,
            self.origin,
            self.prev.short(),
            self.hash.short(),
            self.payload.len()
        )
    }
}

impl Block {
    /// H(height ∥ seq ∥ prev ∥ |payload| ∥ payload ∥ origin), integers big-endian.
    pub fn compute_hash(height: u64, seq: u64, prev: &Digest, payload: &[u8], origin: NodeId) -> Digest {
        Digest::of_parts(&[
            &height.to_be_bytes(),
            &seq.to_be_bytes(),
            &prev.0,
            &(payload.len() as u32).to_be_bytes(),
            payload,
            &origin.0.to_be_bytes(),
        ])
    }

    pub fn new(height: u64, seq: u64, prev: Digest, payload: Vec<u8>, origin: NodeId) -> Block {
        let hash = Block::compute_hash(height, seq, &prev, &payload, origin);
        Block { height, seq, prev, payload, origin, hash }
    }

    /// The stored hash matches the content.
    pub fn is_self_consistent(&self) -> bool {
        Block::compute_hash(self.height, self.seq, &self.prev, &self.payload, self.origin) == self.hash
    }

    pub fn reference(&self) -> BlockRef {
        BlockRef { height: self.height, seq: self.seq, hash: self.hash }
    }
}

/// Genesis: height 0, all-zero hash, never stored.
pub const GENESIS: BlockRef = BlockRef { height: 0, seq: 0, hash: Digest::ZERO };

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("sequence gap: expected height {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("consensus sequence {got} does not follow {head}")]
    SequenceRegression { head: u64, got: u64 },
    #[error("block {height} does not link to the head")]
    BadLink { height: u64 },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of walking the chain backward.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "camelCase")]
pub enum Verification {
    Ok { head: BlockRef },
    /// The highest height at which content, hash or linkage is wrong.
    Broken { height: u64 },
    /// A block the walk needs is not stored; fetch it and verify again.
    Missing { hashes: Vec<Digest> },
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok { .. })
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verification::Ok { head } => write!(f, "ok, head={} height={}", head.hash, head.height),
            Verification::Broken { height } => write!(f, "broken link at height {height}"),
            Verification::Missing { hashes } => {
                write!(f, "missing blocks:")?;
                for h in hashes {
                    write!(f, " {h}")?;
                }
                Ok(())
            }
        }
    }
}

/// Block exchange between block services.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum PeerMessage {
    BlockRequest { from: u64, count: u32 },
    BlockByHash { hash: Digest },
    BlockSend { blocks: Vec<Block> },
}

/// Append-only chain with an in-memory index, optionally backed by a log file.
#[derive(Debug, Default)]
pub struct ChainStore {
    blocks: BTreeMap<u64, Block>,
    by_hash: BTreeMap<Digest, u64>,
    by_seq: BTreeMap<u64, u64>,
    /// Heights whose on-disk framing was inconsistent when loaded.
    damaged: std::collections::BTreeSet<u64>,
    file: Option<log::LogFile>,
}

/// What `open` found in an existing log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpenReport {
    pub blocks: u64,
    pub truncated_bytes: u64,
    pub damaged: Vec<u64>,
}

impl ChainStore {
    pub fn memory() -> Self {
        Self::default()
    }

    /// Opens or creates the log at `path`. A partial trailing record left by
    /// a crash is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, OpenReport), ChainError> {
        let (file, loaded) = log::LogFile::open(path.as_ref())?;
        let mut store = ChainStore { file: Some(file), ..Default::default() };
        let report = OpenReport {
            blocks: loaded.blocks.len() as u64,
            truncated_bytes: loaded.truncated_bytes,
            damaged: loaded.damaged.clone(),
        };
        for (i, b) in loaded.blocks.into_iter().enumerate() {
            store.index(i as u64 + 1, b);
        }
        store.damaged = loaded.damaged.into_iter().collect();
        Ok((store, report))
    }

    /// Reads a log without opening it for writing; nothing on disk changes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, OpenReport), ChainError> {
        let buf = std::fs::read(path.as_ref())?;
        let loaded = log::decode_log(&buf)?;
        let mut store = ChainStore::default();
        let report = OpenReport {
            blocks: loaded.blocks.len() as u64,
            truncated_bytes: loaded.truncated_bytes,
            damaged: loaded.damaged.clone(),
        };
        for (i, b) in loaded.blocks.into_iter().enumerate() {
            store.index(i as u64 + 1, b);
        }
        store.damaged = loaded.damaged.into_iter().collect();
        Ok((store, report))
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.file.as_ref().map(|f| f.path().to_path_buf())
    }

    fn index(&mut self, height: u64, b: Block) {
        self.by_hash.insert(b.hash, height);
        self.by_seq.insert(b.seq, height);
        self.blocks.insert(height, b);
    }

    pub fn height(&self) -> u64 {
        self.blocks.keys().next_back().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head(&self) -> BlockRef {
        self.blocks.values().next_back().map(Block::reference).unwrap_or(GENESIS)
    }

    pub fn get(&self, height: u64) -> Option<&Block> {
        self.blocks.get(&height)
    }

    pub fn by_hash(&self, hash: &Digest) -> Option<&Block> {
        self.by_hash.get(hash).and_then(|h| self.blocks.get(h))
    }

    /// The block ordered at consensus sequence `seq`, if that sequence
    /// number produced one.
    pub fn by_seq(&self, seq: u64) -> Option<&Block> {
        self.by_seq.get(&seq).and_then(|h| self.blocks.get(h))
    }

    pub fn range(&self, from: u64, count: u32) -> Vec<Block> {
        let from = from.max(1);
        (from..from.saturating_add(count as u64)).map_while(|h| self.blocks.get(&h).cloned()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values()
    }

    /// Builds the next block on the head and persists it.
    pub fn append_ordered(
        &mut self,
        height: u64,
        seq: u64,
        payload: Vec<u8>,
        origin: NodeId,
    ) -> Result<Block, ChainError> {
        let head = self.head();
        if height != head.height + 1 {
            return Err(ChainError::SequenceGap { expected: head.height + 1, got: height });
        }
        if seq <= head.seq && head.height > 0 {
            return Err(ChainError::SequenceRegression { head: head.seq, got: seq });
        }
        let block = Block::new(height, seq, head.hash, payload, origin);
        self.persist(&block)?;
        self.index(height, block.clone());
        Ok(block)
    }

    /// Appends a block received from a peer. It must extend the head.
    pub fn append_verified(&mut self, block: Block) -> Result<(), ChainError> {
        let head = self.head();
        if block.height != head.height + 1 {
            return Err(ChainError::SequenceGap { expected: head.height + 1, got: block.height });
        }
        if block.prev != head.hash || !block.is_self_consistent() {
            return Err(ChainError::BadLink { height: block.height });
        }
        self.persist(&block)?;
        self.index(block.height, block);
        Ok(())
    }

    fn persist(&mut self, block: &Block) -> Result<(), ChainError> {
        if let Some(f) = &mut self.file {
            f.append(block)?;
        }
        Ok(())
    }

    /// Drops every block above `keep`.
    pub fn truncate(&mut self, keep: u64) -> Result<(), ChainError> {
        let dropped = self.blocks.split_off(&(keep + 1));
        if dropped.is_empty() {
            return Ok(());
        }
        for b in dropped.values() {
            self.by_hash.remove(&b.hash);
            self.by_seq.remove(&b.seq);
        }
        self.damaged.retain(|h| *h <= keep);
        self.rewrite()
    }

    /// Removes all blocks and the backing file content.
    pub fn wipe(&mut self) -> Result<(), ChainError> {
        self.blocks.clear();
        self.by_hash.clear();
        self.by_seq.clear();
        self.damaged.clear();
        self.rewrite()
    }

    fn rewrite(&mut self) -> Result<(), ChainError> {
        if let Some(f) = &mut self.file {
            f.rewrite(self.blocks.values())?;
        }
        Ok(())
    }

    /// Replaces a stored block without any checks and rewrites the log.
    /// Exists for fault injection.
    pub fn tamper(&mut self, height: u64, edit: impl FnOnce(&mut Block)) -> Result<(), ChainError> {
        if let Some(b) = self.blocks.get_mut(&height) {
            edit(b);
        }
        self.rewrite()
    }

    /// Removes one block without relinking. Exists for fault injection.
    pub fn remove(&mut self, height: u64) -> Option<Block> {
        self.blocks.remove(&height)
    }

    /// Verifies the stored head against itself.
    pub fn verify(&self) -> Verification {
        match self.blocks.values().next_back() {
            None => Verification::Ok { head: GENESIS },
            Some(b) => self.verify_chain(b.reference()),
        }
    }

    /// Walks backward from the trusted `from` to genesis, recomputing every
    /// hash and checking that each block's hash is the one its successor
    /// (or `from`) names and that heights are consecutive.
    pub fn verify_chain(&self, from: BlockRef) -> Verification {
        let mut expected = from.hash;
        let mut height = from.height;
        while height > 0 {
            let Some(b) = self.blocks.get(&height) else {
                return Verification::Missing { hashes: vec![expected] };
            };
            if self.damaged.contains(&height)
                || b.height != height
                || b.hash != expected
                || !b.is_self_consistent()
            {
                return Verification::Broken { height };
            }
            expected = b.prev;
            height -= 1;
        }
        if !expected.is_zero() {
            return Verification::Broken { height: 1 };
        }
        Verification::Ok { head: from }
    }

    /// Answers a peer's request. Incoming `BlockSend` messages are not
    /// handled here; they go to a [`CatchUp`].
    pub fn serve_peer(&self, msg: &PeerMessage) -> Option<PeerMessage> {
        match msg {
            PeerMessage::BlockRequest { from, count } => Some(PeerMessage::BlockSend {
                blocks: self.range(*from, (*count).min(MAX_BLOCKS_PER_SEND)),
            }),
            PeerMessage::BlockByHash { hash } => {
                Some(PeerMessage::BlockSend { blocks: self.by_hash(hash).cloned().into_iter().collect() })
            }
            PeerMessage::BlockSend { .. } => None,
        }
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests;
