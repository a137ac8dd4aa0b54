use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::digest::Digest;
use crate::model::{CaseId, NodeId, SpecKey, WorkflowSpec};

/// What a timer does to its work item when it fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TimerAction {
    Cancel,
    Skip,
}

/// A state-changing engine call. The same value is ordered as a request,
/// stored as a block transaction and applied by every engine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "opType", content = "payload", rename_all_fields = "camelCase")]
pub enum Operation {
    LoadSpecification { spec: WorkflowSpec },
    UnloadSpecification { spec_id: String, version: u32 },
    LaunchCase {
        spec_id: String,
        version: u32,
        #[serde(default)]
        case_data: BTreeMap<String, String>,
    },
    CancelCase { case_id: CaseId },
    StartWorkItem { work_item_id: String },
    CompleteWorkItem {
        work_item_id: String,
        #[serde(default)]
        data: BTreeMap<String, String>,
    },
    SuspendWorkItem { work_item_id: String },
    UnsuspendWorkItem { work_item_id: String },
    RollbackWorkItem { work_item_id: String },
    SkipWorkItem { work_item_id: String },
    CancelWorkItem { work_item_id: String },
    TimerExpiry { work_item_id: String, action: TimerAction },
    /// A scheduled launch whose delay has elapsed on the scheduling node.
    DelayedLaunchFire {
        spec_id: String,
        version: u32,
        #[serde(default)]
        case_data: BTreeMap<String, String>,
        delay_ms: u64,
    },
}

impl Operation {
    /// The work item this operation targets, if it is a work-item operation.
    pub fn work_item(&self) -> Option<&str> {
        use Operation::*;
        match self {
            StartWorkItem { work_item_id }
            | CompleteWorkItem { work_item_id, .. }
            | SuspendWorkItem { work_item_id }
            | UnsuspendWorkItem { work_item_id }
            | RollbackWorkItem { work_item_id }
            | SkipWorkItem { work_item_id }
            | CancelWorkItem { work_item_id }
            | TimerExpiry { work_item_id, .. } => Some(work_item_id),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        use Operation::*;
        match self {
            LoadSpecification { .. } => "LoadSpecification",
            UnloadSpecification { .. } => "UnloadSpecification",
            LaunchCase { .. } => "LaunchCase",
            CancelCase { .. } => "CancelCase",
            StartWorkItem { .. } => "StartWorkItem",
            CompleteWorkItem { .. } => "CompleteWorkItem",
            SuspendWorkItem { .. } => "SuspendWorkItem",
            UnsuspendWorkItem { .. } => "UnsuspendWorkItem",
            RollbackWorkItem { .. } => "RollbackWorkItem",
            SkipWorkItem { .. } => "SkipWorkItem",
            CancelWorkItem { .. } => "CancelWorkItem",
            TimerExpiry { .. } => "TimerExpiry",
            DelayedLaunchFire { .. } => "DelayedLaunchFire",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkflowOperation {
    #[serde(flatten)]
    pub op: Operation,
    pub origin_node: NodeId,
    pub client_request_id: String,
}

impl WorkflowOperation {
    pub fn new(op: Operation, origin_node: NodeId, client_request_id: impl Into<String>) -> Self {
        WorkflowOperation { op, origin_node, client_request_id: client_request_id.into() }
    }

    /// Canonical bytes: what gets ordered, hashed and stored on chain.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkItemState {
    Enabled,
    Started,
    Suspended,
    Completed,
    Cancelled,
    Skipped,
}

impl WorkItemState {
    pub fn is_active(self) -> bool {
        matches!(self, Self::Enabled | Self::Started | Self::Suspended)
    }

    /// The work item transition relation.
    pub fn can_become(self, next: WorkItemState) -> bool {
        use WorkItemState::*;
        matches!(
            (self, next),
            (Enabled, Started | Cancelled | Skipped)
                | (Started, Completed | Suspended | Cancelled | Skipped | Enabled)
                | (Suspended, Started | Cancelled)
        )
    }
}

/// Consensus-relevant part of a work item. Local timestamps live in
/// [`ItemTimes`] and never enter digests, blocks or replies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkItem {
    pub id: String,
    pub task_id: String,
    pub case_id: CaseId,
    pub state: WorkItemState,
    pub assigned_node: NodeId,
    /// Places whose tokens this item consumed when it started.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consumed: Vec<String>,
}

/// Node-local timestamps (milliseconds on the local clock).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ItemTimes {
    pub enablement_time: Option<u64>,
    pub start_time: Option<u64>,
    pub completion_time: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseStatus {
    Running,
    Completed,
    Cancelled,
    Deadlocked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Case {
    pub id: CaseId,
    pub spec: SpecKey,
    /// Token count per place; zero entries are removed.
    pub marking: BTreeMap<String, u32>,
    pub status: CaseStatus,
    pub case_data: BTreeMap<String, String>,
    /// Enablement counter per task, used for work item ids.
    pub counters: BTreeMap<String, u32>,
}

/// The replicated state of work.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct EngineState {
    pub specs: BTreeMap<String, WorkflowSpec>,
    #[serde(with = "crate::canonical::pairs")]
    pub cases: BTreeMap<CaseId, Case>,
    pub work_items: BTreeMap<String, WorkItem>,
    pub last_block_hash: Digest,
    pub applied_count: u64,
}

impl EngineState {
    /// Hash of the canonical serialization. Time fields are not part of
    /// `EngineState`, so they cannot influence it.
    pub fn digest(&self) -> Digest {
        Digest::of(&canonical::to_bytes(self))
    }

    pub fn spec(&self, key: &SpecKey) -> Option<&WorkflowSpec> {
        self.specs.get(&key.to_string())
    }

    /// Work items of one case, in id order.
    pub fn items_of_case(&self, case: CaseId) -> impl Iterator<Item = &WorkItem> {
        let prefix = format!("{case}.");
        self.work_items
            .range(prefix.clone()..)
            .take_while(move |(k, _)| k.starts_with(&prefix))
            .map(|(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    IllegalTransition,
    UnknownId,
    SpecNotLoaded,
    SpecAlreadyLoaded,
    SpecInUse,
    InvalidSpec,
    CaseNotRunning,
    VisibilityViolation,
    MalformedOperation,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::IllegalTransition => "illegal-transition",
            ErrorCode::UnknownId => "unknown-id",
            ErrorCode::SpecNotLoaded => "spec-not-loaded",
            ErrorCode::SpecAlreadyLoaded => "spec-already-loaded",
            ErrorCode::SpecInUse => "spec-in-use",
            ErrorCode::InvalidSpec => "invalid-spec",
            ErrorCode::CaseNotRunning => "case-not-running",
            ErrorCode::VisibilityViolation => "visibility-violation",
            ErrorCode::MalformedOperation => "malformed-operation",
        }
    }
}

/// Engine rejection. The message is derived only from replicated data so
/// that honest engines produce byte-identical errors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{}: {message}", code.as_str())]
pub struct EngineError {
    pub code: ErrorCode,
    pub message: String,
}

impl EngineError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        EngineError { code, message: message.into() }
    }
}

/// Summary of a case as returned by writes and reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseView {
    pub case_id: CaseId,
    pub spec_id: String,
    pub version: u32,
    pub status: CaseStatus,
}

impl From<&Case> for CaseView {
    fn from(c: &Case) -> Self {
        CaseView { case_id: c.id, spec_id: c.spec.spec_id.clone(), version: c.spec.version, status: c.status }
    }
}

/// Description of the entity a write changed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Entity {
    Spec(SpecKey),
    Case(CaseView),
    WorkItem(WorkItem),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OperationResult {
    Ok(Entity),
    Error(EngineError),
}

impl OperationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, OperationResult::Ok(_))
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        match self {
            OperationResult::Error(e) => Some(e.code),
            OperationResult::Ok(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnouncementKind {
    CaseStart,
    CaseCompletion,
    CaseCancellation,
    CaseDeadlock,
    CaseSuspension,
    CaseResumption,
    WorkItemFiring,
    WorkItemStatusChange,
    WorkItemCancellation,
    TimerExpiry,
}

impl AnnouncementKind {
    pub const ALL: [AnnouncementKind; 10] = [
        Self::CaseStart,
        Self::CaseCompletion,
        Self::CaseCancellation,
        Self::CaseDeadlock,
        Self::CaseSuspension,
        Self::CaseResumption,
        Self::WorkItemFiring,
        Self::WorkItemStatusChange,
        Self::WorkItemCancellation,
        Self::TimerExpiry,
    ];

    pub fn is_case_kind(self) -> bool {
        matches!(
            self,
            Self::CaseStart
                | Self::CaseCompletion
                | Self::CaseCancellation
                | Self::CaseDeadlock
                | Self::CaseSuspension
                | Self::CaseResumption
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Scope {
    Global,
    Local(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Announcement {
    pub kind: AnnouncementKind,
    pub subject: String,
    pub scope: Scope,
}

impl Announcement {
    pub fn case(kind: AnnouncementKind, case: CaseId) -> Self {
        debug_assert!(kind.is_case_kind());
        Announcement { kind, subject: case.to_string(), scope: Scope::Global }
    }

    pub fn item(kind: AnnouncementKind, item: &WorkItem) -> Self {
        debug_assert!(!kind.is_case_kind());
        Announcement { kind, subject: item.id.clone(), scope: Scope::Local(item.assigned_node) }
    }

    /// Whether a node's announcer forwards this event to its observers.
    pub fn relevant_to(&self, node: NodeId) -> bool {
        match self.scope {
            Scope::Global => true,
            Scope::Local(n) => n == node,
        }
    }
}

/// The block that carries an operation: its chain height, the consensus
/// sequence number that ordered it, and its hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub height: u64,
    pub seq: u64,
    pub hash: Digest,
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}@{}:{}", self.height, self.seq, self.hash.short())
    }
}
