//! Node configuration file (JSON).
//!
//! ```json
//! {
//!   "nodeId": 0,
//!   "f": 1,
//!   "members": [
//!     {"id": 0, "peer": "127.0.0.1:7000", "client": "127.0.0.1:7100", "monitor": "127.0.0.1:7200"},
//!     ...
//!   ],
//!   "clusterSecret": "shared secret all pair keys are derived from",
//!   "operatorKey": "64 hex chars",
//!   "operatorToken": "token for POST /recover",
//!   "dataDir": "data/node0",
//!   "readMode": "unorderedConsensus",
//!   "faultPolicy": "failEarly"
//! }
//! ```
//!
//! `members` is the address book. Nodes listed there but left out of
//! `initialView` start outside the view and ask to join.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use bftflow_core::auth::KeyRing;
use bftflow_core::gateway::{FaultPolicy, NodeSettings, ReadMode};
use bftflow_core::ordering::{ClientSettings, Settings, ViewConfig};
use bftflow_core::NodeId;

/// The only hash the chain and digests use.
pub const HASH_FUNCTION: &str = "sha256";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Member {
    pub id: NodeId,
    pub peer: SocketAddr,
    pub client: SocketAddr,
    pub monitor: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct Timeouts {
    pub view_change_ms: u64,
    pub status_ms: u64,
    pub client_retransmit_ms: u64,
    pub client_timeout_ms: u64,
    pub recheck_interval_ms: u64,
    pub recheck_attempts: u32,
    pub join_retry_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        let s = Settings::default();
        let c = ClientSettings::default();
        let n = NodeSettings::default();
        Timeouts {
            view_change_ms: s.view_change_ms,
            status_ms: s.status_ms,
            client_retransmit_ms: c.retransmit_ms,
            client_timeout_ms: c.timeout_ms,
            recheck_interval_ms: n.recheck_interval_ms,
            recheck_attempts: n.recheck_attempts,
            join_retry_ms: n.join_retry_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub f: u32,
    pub members: Vec<Member>,
    #[serde(default)]
    pub initial_view: Option<Vec<NodeId>>,
    pub cluster_secret: String,
    #[serde(default)]
    pub operator_key: Option<String>,
    #[serde(default)]
    pub operator_token: Option<String>,
    pub data_dir: PathBuf,
    #[serde(default = "default_read_mode")]
    pub read_mode: ReadMode,
    #[serde(default = "default_policy")]
    pub fault_policy: FaultPolicy,
    #[serde(default = "default_hash")]
    pub hash_function: String,
    /// Block-exchange neighbours; every member when absent.
    #[serde(default)]
    pub peers: Option<Vec<NodeId>>,
    #[serde(default)]
    pub audit_interval_ms: Option<u64>,
    #[serde(default)]
    pub timeouts: Timeouts,
}

fn default_read_mode() -> ReadMode {
    ReadMode::UnorderedConsensus
}

fn default_policy() -> FaultPolicy {
    FaultPolicy::FailEarly
}

fn default_hash() -> String {
    HASH_FUNCTION.into()
}

impl NodeConfig {
    pub fn load(path: &Path) -> anyhow::Result<NodeConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: NodeConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.data_dir.is_relative() {
            if let Some(base) = path.parent() {
                cfg.data_dir = base.join(&cfg.data_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.hash_function != HASH_FUNCTION {
            bail!("unsupported hash function {:?}; only {HASH_FUNCTION}", self.hash_function);
        }
        if self.member(self.node_id).is_none() {
            bail!("node {} is not in the member list", self.node_id);
        }
        let mut ids: Vec<NodeId> = self.members.iter().map(|m| m.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.members.len() {
            bail!("duplicate member ids");
        }
        self.view().map_err(|e| anyhow::anyhow!("initial view: {e}"))?;
        if let Some(view) = &self.initial_view {
            if let Some(x) = view.iter().find(|v| self.member(**v).is_none()) {
                bail!("initial view names node {x}, which has no address");
            }
        }
        self.operator_key()?;
        Ok(())
    }

    pub fn member(&self, id: NodeId) -> Option<&Member> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn me(&self) -> &Member {
        self.member(self.node_id).expect("validated")
    }

    pub fn view(&self) -> Result<ViewConfig, bftflow_core::ordering::ConfigError> {
        let ids = match &self.initial_view {
            Some(v) => v.clone(),
            None => self.members.iter().map(|m| m.id).collect(),
        };
        ViewConfig::new(ids, self.f)
    }

    pub fn keys(&self) -> KeyRing {
        KeyRing::from_secret(self.node_id, self.cluster_secret.as_bytes())
    }

    pub fn operator_key(&self) -> anyhow::Result<Option<[u8; 32]>> {
        let Some(h) = &self.operator_key else { return Ok(None) };
        let bytes = hex::decode(h).context("operatorKey is not hex")?;
        let key: [u8; 32] = bytes.try_into().map_err(|_| anyhow::anyhow!("operatorKey must be 32 bytes"))?;
        Ok(Some(key))
    }

    pub fn settings(&self) -> anyhow::Result<NodeSettings> {
        let t = &self.timeouts;
        Ok(NodeSettings {
            read_mode: self.read_mode,
            fault_policy: self.fault_policy,
            consensus: Settings {
                view_change_ms: t.view_change_ms,
                status_ms: t.status_ms,
                operator_key: self.operator_key()?,
                ..Settings::default()
            },
            client: ClientSettings { retransmit_ms: t.client_retransmit_ms, timeout_ms: t.client_timeout_ms },
            recheck_attempts: t.recheck_attempts,
            recheck_interval_ms: t.recheck_interval_ms,
            audit_interval_ms: self.audit_interval_ms,
            join_retry_ms: t.join_retry_ms,
            block_peers: self.peers.clone(),
        })
    }
}
