//! Total ordering of requests among `n >= 3f+1` replicas with PBFT.
//!
//! The replica and client are sans-IO: they consume messages and clock
//! readings and leave outgoing messages in an outbox. Peer authentication
//! is the transport's job; `Request::auth` only matters when a request is
//! relayed by someone other than its client (view changes, state transfer).

mod client;
mod config;
mod messages;
mod replica;

pub use client::{Client, ClientEvent, ClientSettings};
pub use config::{max_faults, quorum_overlap, reply_quorum, vote_threshold, ConfigChange, ConfigError, ViewConfig};
pub use messages::{CheckpointState, ConsensusMessage, LogEntry, Mode, PreparedEntry, Request, RequestBody};
pub use replica::{operator_tag, Application, PersistentState, Phase, Replica, ReplicaStats, Settings, ID_WINDOW};
