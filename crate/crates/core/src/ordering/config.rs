use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::NodeId;

/// Largest f that `n` members tolerate.
pub fn max_faults(n: usize) -> u32 {
    (n.saturating_sub(1) / 3) as u32
}

/// Matching replies a client needs.
pub fn reply_quorum(f: u32) -> usize {
    2 * f as usize + 1
}

/// Matching prepares (or commits) from other replicas needed on top of the
/// replica's own vote.
pub fn vote_threshold(f: u32) -> usize {
    2 * f as usize
}

/// Minimum overlap of any two quorums of size `q` drawn from `n` members.
pub fn quorum_overlap(n: usize, q: usize) -> usize {
    (2 * q).saturating_sub(n)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{n} members cannot tolerate f={f} (need {need})")]
    TooFewMembers { n: usize, f: u32, need: usize },
    #[error("duplicate member {0}")]
    Duplicate(NodeId),
    #[error("node {0} is already a member")]
    AlreadyMember(NodeId),
    #[error("node {0} is not a member")]
    NotMember(NodeId),
}

/// A membership change, ordered like any other request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "camelCase")]
pub enum ConfigChange {
    Join { node: NodeId },
    Leave { node: NodeId },
    SetF { f: u32 },
}

/// Membership, fault bound and current view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViewConfig {
    pub view: u64,
    pub members: Vec<NodeId>,
    pub f: u32,
    /// Bumped by every executed reconfiguration.
    pub epoch: u64,
}

impl ViewConfig {
    pub fn new(members: Vec<NodeId>, f: u32) -> Result<Self, ConfigError> {
        let c = ViewConfig { view: 0, members, f, epoch: 0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let need = 3 * self.f as usize + 1;
        if self.members.len() < need {
            return Err(ConfigError::TooFewMembers { n: self.members.len(), f: self.f, need });
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m) {
                return Err(ConfigError::Duplicate(*m));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn leader_of(&self, view: u64) -> NodeId {
        self.members[(view % self.members.len() as u64) as usize]
    }

    pub fn leader(&self) -> NodeId {
        self.leader_of(self.view)
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    /// 2f+1.
    pub fn quorum(&self) -> usize {
        reply_quorum(self.f)
    }

    /// f+1: enough to include one correct member.
    pub fn weak(&self) -> usize {
        self.f as usize + 1
    }

    /// The configuration after `change`, with the view advanced by one so the
    /// switch lands on a fresh view on every replica.
    pub fn apply(&self, change: ConfigChange) -> Result<ViewConfig, ConfigError> {
        let mut next = self.clone();
        match change {
            ConfigChange::Join { node } => {
                if self.is_member(node) {
                    return Err(ConfigError::AlreadyMember(node));
                }
                next.members.push(node);
            }
            ConfigChange::Leave { node } => {
                if !self.is_member(node) {
                    return Err(ConfigError::NotMember(node));
                }
                next.members.retain(|m| *m != node);
            }
            ConfigChange::SetF { f } => next.f = f,
        }
        next.validate()?;
        next.view += 1;
        next.epoch += 1;
        Ok(next)
    }
}

impl fmt::Display for ViewConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "view {} leader {} f={} members [", self.view, self.leader(), self.f)?;
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "] epoch {}", self.epoch)
    }
}
