//! Fetching missing blocks from peers.
//!
//! Blocks are accepted only once they verify backward from a trusted target
//! (the head hash agreed through consensus state exchange). Anything that
//! does not fit is dropped and its sender flagged.

use std::collections::{BTreeMap, BTreeSet};

use crate::digest::Digest;
use crate::engine::BlockRef;
use crate::model::NodeId;

use super::Block;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CatchUpStatus {
    InProgress,
    /// All blocks between base and target are verified.
    Complete,
    /// The verified suffix does not link to the local head: the local chain
    /// itself is wrong below the base.
    BaseMismatch,
}

#[derive(Clone, Debug)]
pub struct CatchUp {
    base: BlockRef,
    target: BlockRef,
    /// Next height to verify, walking down from the target.
    next: u64,
    /// Hash the block at `next` must have.
    expected: Digest,
    verified: BTreeMap<u64, Block>,
    pending: BTreeMap<u64, Vec<(NodeId, Block)>>,
    flagged: BTreeSet<NodeId>,
}

impl CatchUp {
    /// `base` is the local head, `target` the trusted head to reach.
    pub fn new(base: BlockRef, target: BlockRef) -> Self {
        CatchUp {
            base,
            target,
            next: target.height,
            expected: target.hash,
            verified: BTreeMap::new(),
            pending: BTreeMap::new(),
            flagged: BTreeSet::new(),
        }
    }

    pub fn base(&self) -> BlockRef {
        self.base
    }

    pub fn target(&self) -> BlockRef {
        self.target
    }

    pub fn flagged(&self) -> &BTreeSet<NodeId> {
        &self.flagged
    }

    pub fn status(&self) -> CatchUpStatus {
        if self.next > self.base.height {
            CatchUpStatus::InProgress
        } else if self.expected == self.base.hash {
            CatchUpStatus::Complete
        } else {
            CatchUpStatus::BaseMismatch
        }
    }

    /// Height ranges `(from, count)` still needed, lowest first.
    pub fn wanted(&self, max_count: u32) -> Vec<(u64, u32)> {
        let mut out = Vec::new();
        let mut h = self.base.height + 1;
        while h <= self.next {
            if self.pending.contains_key(&h) {
                h += 1;
                continue;
            }
            let start = h;
            while h <= self.next && !self.pending.contains_key(&h) && h - start < max_count as u64 {
                h += 1;
            }
            out.push((start, (h - start) as u32));
        }
        out
    }

    /// Offers blocks received from `sender`. Returns the senders newly
    /// flagged for sending blocks that failed verification.
    pub fn offer(&mut self, sender: NodeId, blocks: Vec<Block>) -> Vec<NodeId> {
        for b in blocks {
            if b.height <= self.base.height || b.height > self.next {
                continue;
            }
            self.pending.entry(b.height).or_default().push((sender, b));
        }
        let mut newly = Vec::new();
        while self.next > self.base.height {
            let Some(candidates) = self.pending.remove(&self.next) else { break };
            let mut accepted = None;
            for (from, b) in candidates {
                let good = b.height == self.next && b.hash == self.expected && b.is_self_consistent();
                if good && accepted.is_none() {
                    accepted = Some(b);
                } else if !good && self.flagged.insert(from) {
                    newly.push(from);
                }
            }
            let Some(b) = accepted else { break };
            self.expected = b.prev;
            self.verified.insert(b.height, b);
            self.next -= 1;
        }
        newly
    }

    /// Verified blocks in ascending height order. Only meaningful once
    /// [`CatchUpStatus::Complete`].
    pub fn into_blocks(self) -> Vec<Block> {
        self.verified.into_values().collect()
    }

    pub fn verified_count(&self) -> usize {
        self.verified.len()
    }
}
