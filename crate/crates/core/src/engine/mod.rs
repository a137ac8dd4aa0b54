//! Deterministic workflow engine.
//!
//! [`Engine::apply`] executes one consensus-ordered [`WorkflowOperation`].
//! Every check runs before the first mutation, so a rejected operation leaves
//! the workflow state untouched; only `lastBlockHash`/`appliedCount` advance,
//! because the operation's block is on the chain either way.

mod net;
mod query;
mod types;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use net::{fire_token_game, input_places, join_satisfied, output_places, settle, Firing, Marking};
pub use query::{QueryResult, ReadQuery};
pub use types::*;

use crate::digest::Digest;
use crate::model::{check_spec, split_work_item_id, work_item_id, CaseId, NodeId, SpecKey, TimerTrigger};

/// Outcome of applying one operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub result: OperationResult,
    pub announcements: Vec<Announcement>,
}

/// A due timer, to be submitted through the gateway as a `TimerExpiry` op.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimerEvent {
    pub work_item_id: String,
    pub action: TimerAction,
}

impl TimerEvent {
    pub fn into_operation(self) -> Operation {
        Operation::TimerExpiry { work_item_id: self.work_item_id, action: self.action }
    }
}

/// Engine state plus node-local timestamps.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Engine {
    state: EngineState,
    times: BTreeMap<String, ItemTimes>,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    /// Direct mutable access, used by fault injection in the simulator.
    pub fn state_mut(&mut self) -> &mut EngineState {
        &mut self.state
    }

    pub fn digest(&self) -> Digest {
        self.state.digest()
    }

    pub fn last_block_hash(&self) -> Digest {
        self.state.last_block_hash
    }

    pub fn applied_count(&self) -> u64 {
        self.state.applied_count
    }

    pub fn times(&self, work_item: &str) -> ItemTimes {
        self.times.get(work_item).copied().unwrap_or_default()
    }

    /// Engine rebuilt from replicated state fetched from peers. Local
    /// timestamps restart at `now` for every active item.
    pub fn from_state(state: EngineState, now: u64) -> Self {
        let mut times = BTreeMap::new();
        for item in state.work_items.values() {
            let t = match item.state {
                WorkItemState::Enabled => ItemTimes { enablement_time: Some(now), ..Default::default() },
                WorkItemState::Started | WorkItemState::Suspended => {
                    ItemTimes { enablement_time: Some(now), start_time: Some(now), completion_time: None }
                }
                _ => continue,
            };
            times.insert(item.id.clone(), t);
        }
        Engine { state, times }
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("engine serializes")
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Applies one ordered operation carried by `block`. `now` is the local
    /// clock and only feeds the local timestamps.
    pub fn apply(&mut self, op: &WorkflowOperation, block: BlockRef, now: u64) -> Applied {
        let mut ann = Vec::new();
        let result = match self.dispatch(op, block, now, &mut ann) {
            Ok(entity) => OperationResult::Ok(entity),
            Err(e) => {
                ann.clear();
                OperationResult::Error(e)
            }
        };
        self.state.last_block_hash = block.hash;
        self.state.applied_count = block.height;
        Applied { result, announcements: ann }
    }

    /// Records a block whose payload is not a workflow operation at all.
    pub fn apply_malformed(&mut self, block: BlockRef) -> Applied {
        self.state.last_block_hash = block.hash;
        self.state.applied_count = block.height;
        Applied {
            result: OperationResult::Error(EngineError::new(
                ErrorCode::MalformedOperation,
                "payload is not a workflow operation",
            )),
            announcements: Vec::new(),
        }
    }

    fn dispatch(
        &mut self,
        wop: &WorkflowOperation,
        block: BlockRef,
        now: u64,
        ann: &mut Vec<Announcement>,
    ) -> Result<Entity, EngineError> {
        use Operation::*;
        match &wop.op {
            LoadSpecification { spec } => {
                check_spec(spec).map_err(|e| EngineError::new(ErrorCode::InvalidSpec, e.to_string()))?;
                let key = spec.key().to_string();
                if self.state.specs.contains_key(&key) {
                    return Err(EngineError::new(ErrorCode::SpecAlreadyLoaded, key));
                }
                self.state.specs.insert(key, spec.clone());
                Ok(Entity::Spec(spec.key()))
            }
            UnloadSpecification { spec_id, version } => {
                let key = SpecKey { spec_id: spec_id.clone(), version: *version };
                if self.state.spec(&key).is_none() {
                    return Err(EngineError::new(ErrorCode::SpecNotLoaded, key.to_string()));
                }
                if self.state.cases.values().any(|c| c.spec == key && c.status == CaseStatus::Running) {
                    return Err(EngineError::new(ErrorCode::SpecInUse, key.to_string()));
                }
                self.state.specs.remove(&key.to_string());
                Ok(Entity::Spec(key))
            }
            LaunchCase { spec_id, version, case_data }
            | DelayedLaunchFire { spec_id, version, case_data, .. } => {
                self.launch(SpecKey { spec_id: spec_id.clone(), version: *version }, case_data, block, now, ann)
            }
            CancelCase { case_id } => self.cancel_case(*case_id, now, ann),
            StartWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Start, now, ann),
            CompleteWorkItem { work_item_id, data } => {
                self.item_op(wop, work_item_id, Step::Complete(data), now, ann)
            }
            SuspendWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Suspend, now, ann),
            UnsuspendWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Unsuspend, now, ann),
            RollbackWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Rollback, now, ann),
            SkipWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Skip, now, ann),
            CancelWorkItem { work_item_id } => self.item_op(wop, work_item_id, Step::Cancel, now, ann),
            TimerExpiry { work_item_id, action } => {
                self.item_op(wop, work_item_id, Step::Timer(*action), now, ann)
            }
        }
    }

    fn launch(
        &mut self,
        key: SpecKey,
        case_data: &BTreeMap<String, String>,
        block: BlockRef,
        now: u64,
        ann: &mut Vec<Announcement>,
    ) -> Result<Entity, EngineError> {
        let spec = self
            .state
            .spec(&key)
            .ok_or_else(|| EngineError::new(ErrorCode::SpecNotLoaded, key.to_string()))?;
        let id = CaseId(block.seq);
        if self.state.cases.contains_key(&id) {
            return Err(EngineError::new(ErrorCode::IllegalTransition, format!("case {id} exists")));
        }
        let marking = spec.start.iter().map(|t| (format!("start:{t}"), 1)).collect();
        let case = Case {
            id,
            spec: key,
            marking,
            status: CaseStatus::Running,
            case_data: case_data.clone(),
            counters: BTreeMap::new(),
        };
        self.state.cases.insert(id, case);
        ann.push(Announcement::case(AnnouncementKind::CaseStart, id));
        self.settle_case(id, now, ann);
        Ok(Entity::Case(CaseView::from(&self.state.cases[&id])))
    }

    fn cancel_case(&mut self, id: CaseId, now: u64, ann: &mut Vec<Announcement>) -> Result<Entity, EngineError> {
        let case = self
            .state
            .cases
            .get(&id)
            .ok_or_else(|| EngineError::new(ErrorCode::UnknownId, format!("case {id}")))?;
        if case.status != CaseStatus::Running {
            return Err(EngineError::new(ErrorCode::CaseNotRunning, format!("case {id}")));
        }
        let active: Vec<String> =
            self.state.items_of_case(id).filter(|i| i.state.is_active()).map(|i| i.id.clone()).collect();
        for item_id in active {
            let item = self.state.work_items.get_mut(&item_id).expect("listed above");
            item.state = WorkItemState::Cancelled;
            self.times.entry(item_id).or_default().completion_time = Some(now);
            ann.push(Announcement::item(AnnouncementKind::WorkItemCancellation, item));
        }
        let case = self.state.cases.get_mut(&id).expect("checked above");
        case.status = CaseStatus::Cancelled;
        ann.push(Announcement::case(AnnouncementKind::CaseCancellation, id));
        Ok(Entity::Case(CaseView::from(&*case)))
    }

    fn item_op(
        &mut self,
        wop: &WorkflowOperation,
        item_id: &str,
        step: Step<'_>,
        now: u64,
        ann: &mut Vec<Announcement>,
    ) -> Result<Entity, EngineError> {
        use WorkItemState::*;
        let unknown = || EngineError::new(ErrorCode::UnknownId, format!("work item {item_id}"));
        let item = self.state.work_items.get(item_id).ok_or_else(unknown)?;
        if item.assigned_node != wop.origin_node {
            return Err(EngineError::new(
                ErrorCode::VisibilityViolation,
                format!("work item {item_id} is assigned to node {}, not {}", item.assigned_node, wop.origin_node),
            ));
        }
        let case = self.state.cases.get(&item.case_id).ok_or_else(unknown)?;
        let spec = self.state.spec(&case.spec).ok_or_else(|| {
            EngineError::new(ErrorCode::SpecNotLoaded, case.spec.to_string())
        })?;
        let from = item.state;
        let to = match step {
            Step::Start => Started,
            Step::Complete(_) => Completed,
            Step::Suspend => Suspended,
            Step::Unsuspend => Started,
            Step::Rollback => Enabled,
            Step::Skip => Skipped,
            Step::Cancel => Cancelled,
            Step::Timer(TimerAction::Cancel) => Cancelled,
            Step::Timer(TimerAction::Skip) => Skipped,
        };
        let illegal = || {
            EngineError::new(
                ErrorCode::IllegalTransition,
                format!("work item {item_id}: {from:?} -> {to:?}"),
            )
        };
        let legal = from.can_become(to)
            && match step {
                Step::Unsuspend => from == Suspended,
                Step::Start => from == Enabled,
                Step::Rollback => from == Started,
                // A timer cancels only unstarted items and skips only started ones.
                Step::Timer(TimerAction::Cancel) => from == Enabled,
                Step::Timer(TimerAction::Skip) => from == Started,
                _ => true,
            };
        if !legal {
            return Err(illegal());
        }
        if let Step::Timer(action) = step {
            let trigger = spec.task(&item.task_id).and_then(|t| t.timer).map(|t| t.trigger);
            let expected = match action {
                TimerAction::Cancel => TimerTrigger::OnEnablement,
                TimerAction::Skip => TimerTrigger::OnStart,
            };
            if trigger != Some(expected) {
                return Err(illegal());
            }
        }
        if case.status != CaseStatus::Running {
            return Err(EngineError::new(ErrorCode::CaseNotRunning, format!("case {}", case.id)));
        }

        // Checks done; mutate.
        let spec = spec.clone();
        let case_id = case.id;
        let task_id = item.task_id.clone();
        let case = self.state.cases.get_mut(&case_id).expect("present");
        let item = self.state.work_items.get_mut(item_id).expect("present");
        let times = self.times.entry(item_id.to_string()).or_default();
        match step {
            Step::Start => {
                item.consumed = net::consume(&spec, &task_id, &mut case.marking);
                times.start_time = Some(now);
            }
            Step::Complete(data) => {
                for (k, v) in data {
                    case.case_data.insert(k.clone(), v.clone());
                }
                net::produce(&spec, &task_id, &mut case.marking);
                times.completion_time = Some(now);
            }
            Step::Skip | Step::Timer(TimerAction::Skip) => {
                if from == Enabled {
                    item.consumed = net::consume(&spec, &task_id, &mut case.marking);
                }
                net::produce(&spec, &task_id, &mut case.marking);
                times.completion_time = Some(now);
            }
            Step::Cancel | Step::Timer(TimerAction::Cancel) => {
                if from == Enabled {
                    item.consumed = net::consume(&spec, &task_id, &mut case.marking);
                }
                times.completion_time = Some(now);
            }
            Step::Rollback => {
                net::restore(&mut case.marking, &item.consumed);
                item.consumed.clear();
                times.enablement_time = Some(now);
                times.start_time = None;
            }
            Step::Suspend | Step::Unsuspend => {}
        }
        item.state = to;
        if let Step::Timer(_) = step {
            ann.push(Announcement::item(AnnouncementKind::TimerExpiry, item));
        }
        let kind = if to == Cancelled {
            AnnouncementKind::WorkItemCancellation
        } else {
            AnnouncementKind::WorkItemStatusChange
        };
        ann.push(Announcement::item(kind, item));
        let entity = item.clone();
        self.settle_case(case_id, now, ann);
        Ok(Entity::WorkItem(self.state.work_items.get(&entity.id).cloned().unwrap_or(entity)))
    }

    /// Withdraws enabled items that lost their tokens, enables tasks whose
    /// join is satisfied, and finishes the case when nothing is left to do.
    fn settle_case(&mut self, case_id: CaseId, now: u64, ann: &mut Vec<Announcement>) {
        let case = &self.state.cases[&case_id];
        let Some(spec) = self.state.spec(&case.spec) else { return };
        let firing = net::settle(spec, &case.marking, self.state.items_of_case(case_id));

        let assigned: Vec<(String, NodeId)> = firing
            .newly_enabled
            .iter()
            .map(|t| (t.clone(), spec.task(t).expect("task of spec").assigned_node))
            .collect();
        for id in &firing.withdrawn {
            let item = self.state.work_items.get_mut(id).expect("settle lists existing items");
            item.state = WorkItemState::Cancelled;
            self.times.entry(id.clone()).or_default().completion_time = Some(now);
            ann.push(Announcement::item(AnnouncementKind::WorkItemCancellation, item));
        }
        let case = self.state.cases.get_mut(&case_id).expect("present");
        for (task_id, node) in assigned {
            let counter = case.counters.entry(task_id.clone()).or_insert(0);
            *counter += 1;
            let id = work_item_id(case_id, &task_id, *counter);
            let item = WorkItem {
                id: id.clone(),
                task_id,
                case_id,
                state: WorkItemState::Enabled,
                assigned_node: node,
                consumed: Vec::new(),
            };
            ann.push(Announcement::item(AnnouncementKind::WorkItemFiring, &item));
            self.times.insert(id.clone(), ItemTimes { enablement_time: Some(now), ..Default::default() });
            self.state.work_items.insert(id, item);
        }
        if case.status == CaseStatus::Running && firing.status != CaseStatus::Running {
            case.status = firing.status;
            let kind = match firing.status {
                CaseStatus::Completed => AnnouncementKind::CaseCompletion,
                _ => AnnouncementKind::CaseDeadlock,
            };
            ann.push(Announcement::case(kind, case_id));
        }
    }

    /// Timers on items assigned to `node` that are due at local time `now`.
    /// Items that completed (or otherwise left the timed state) yield nothing:
    /// their timer is simply cancelled.
    pub fn schedule_timers(&self, node: NodeId, now: u64) -> Vec<TimerEvent> {
        self.timer_deadlines(node).into_iter().filter(|(due, _)| *due <= now).map(|(_, ev)| ev).collect()
    }

    /// Earliest pending timer deadline for items owned by `node`.
    pub fn next_timer_deadline(&self, node: NodeId) -> Option<u64> {
        self.timer_deadlines(node).into_iter().map(|(d, _)| d).min()
    }

    fn timer_deadlines(&self, node: NodeId) -> Vec<(u64, TimerEvent)> {
        let mut out = Vec::new();
        for item in self.state.work_items.values() {
            if item.assigned_node != node || !item.state.is_active() {
                continue;
            }
            let Some(case) = self.state.cases.get(&item.case_id) else { continue };
            let Some(timer) = self.state.spec(&case.spec).and_then(|s| s.task(&item.task_id)).and_then(|t| t.timer)
            else {
                continue;
            };
            let times = self.times(&item.id);
            let (since, action) = match (timer.trigger, item.state) {
                (TimerTrigger::OnEnablement, WorkItemState::Enabled) => (times.enablement_time, TimerAction::Cancel),
                (TimerTrigger::OnStart, WorkItemState::Started) => (times.start_time, TimerAction::Skip),
                _ => continue,
            };
            if let Some(since) = since {
                out.push((
                    since + timer.duration_ms,
                    TimerEvent { work_item_id: item.id.clone(), action },
                ));
            }
        }
        out
    }

    /// The node a work item is assigned to, if the item is known locally.
    pub fn assignment_of(&self, work_item: &str) -> Option<NodeId> {
        if let Some(item) = self.state.work_items.get(work_item) {
            return Some(item.assigned_node);
        }
        let (case, task, _) = split_work_item_id(work_item)?;
        let case = self.state.cases.get(&case)?;
        self.state.spec(&case.spec)?.task(task).map(|t| t.assigned_node)
    }
}

enum Step<'a> {
    Start,
    Complete(&'a BTreeMap<String, String>),
    Suspend,
    Unsuspend,
    Rollback,
    Skip,
    Cancel,
    Timer(TimerAction),
}
