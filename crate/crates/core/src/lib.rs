//! Workflow management replicated over a byzantine-fault-tolerant ordering
//! layer and a per-node hash chain.
//!
//! Every node runs the same pieces: an ordering replica ([`ordering`]), a
//! block store ([`blockstore`]) and a workflow engine ([`engine`]), tied
//! together by the [`gateway`]. The [`sim`] module drives whole clusters on a
//! deterministic simulated network.

pub mod auth;
pub mod blockstore;
pub mod canonical;
pub mod digest;
pub mod engine;
pub mod gateway;
pub mod model;
pub mod ordering;
pub mod sim;

pub use digest::Digest;
pub use model::NodeId;
