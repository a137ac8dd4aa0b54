//! Static classification of engine calls by locality and mutation.
//!
//! Global writes are ordered and stored on chain; global reads go through
//! one of the read modes; local calls never leave the node.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Locality {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutation {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallClass {
    pub locality: Locality,
    pub mutation: Mutation,
}

const fn class(locality: Locality, mutation: Mutation) -> CallClass {
    CallClass { locality, mutation }
}

const GW: CallClass = class(Locality::Global, Mutation::Write);
const GR: CallClass = class(Locality::Global, Mutation::Read);
const LW: CallClass = class(Locality::Local, Mutation::Write);
const LR: CallClass = class(Locality::Local, Mutation::Read);

/// Every call name the gateway accepts.
pub const CALLS: &[(&str, CallClass)] = &[
    ("LoadSpecification", GW),
    ("UnloadSpecification", GW),
    ("LaunchCase", GW),
    ("CancelCase", GW),
    ("StartWorkItem", GW),
    ("CompleteWorkItem", GW),
    ("SuspendWorkItem", GW),
    ("UnsuspendWorkItem", GW),
    ("RollbackWorkItem", GW),
    ("SkipWorkItem", GW),
    ("CancelWorkItem", GW),
    ("TimerExpiry", GW),
    ("DelayedLaunchFire", GW),
    ("listSpecifications", GR),
    ("listCases", GR),
    ("caseState", GR),
    ("caseData", GR),
    ("listWorkItems", GR),
    ("getWorkItem", GR),
    ("engineDigest", GR),
    // Held by the local scheduler; the launch itself is a DelayedLaunchFire.
    ("ScheduleLaunch", LW),
    ("RegisterService", LW),
    ("RetrieveServices", LR),
    ("NodeStatus", LR),
];

pub fn classify(name: &str) -> Option<CallClass> {
    CALLS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}
