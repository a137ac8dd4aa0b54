//! Token semantics for task graphs.
//!
//! Places are derived from the graph:
//! - `start:T` feeds start task `T` when the case launches;
//! - `X->T` carries a token from AND-split task `X` to `T`;
//! - `X->*` is the single place an XOR-split task `X` marks; every successor
//!   of `X` reads it, so whichever successor starts first takes the token
//!   (deferred choice);
//! - `end:T` is marked when end task `T` finishes.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Split, WorkflowSpec};

use super::types::{Case, CaseStatus, WorkItem, WorkItemState};

pub type Marking = BTreeMap<String, u32>;

pub fn input_places(spec: &WorkflowSpec, task: &str) -> Vec<String> {
    let mut places = BTreeSet::new();
    if spec.start.iter().any(|s| s == task) {
        places.insert(format!("start:{task}"));
    }
    for pred in spec.predecessors(task) {
        let Some(p) = spec.task(pred) else { continue };
        places.insert(match p.split_type {
            Split::Xor => format!("{pred}->*"),
            Split::And => format!("{pred}->{task}"),
        });
    }
    places.into_iter().collect()
}

pub fn output_places(spec: &WorkflowSpec, task: &str) -> Vec<String> {
    let mut places = BTreeSet::new();
    if let Some(t) = spec.task(task) {
        let succ: Vec<&str> = spec.successors(task).collect();
        if !succ.is_empty() {
            match t.split_type {
                Split::Xor => {
                    places.insert(format!("{task}->*"));
                }
                Split::And => {
                    for s in succ {
                        places.insert(format!("{task}->{s}"));
                    }
                }
            }
        }
    }
    if spec.end.iter().any(|e| e == task) {
        places.insert(format!("end:{task}"));
    }
    places.into_iter().collect()
}

pub fn join_satisfied(spec: &WorkflowSpec, task: &str, marking: &Marking) -> bool {
    let Some(t) = spec.task(task) else { return false };
    let inputs = input_places(spec, task);
    if inputs.is_empty() {
        return false;
    }
    let marked = |p: &String| marking.get(p).copied().unwrap_or(0) > 0;
    match t.join_type {
        Split::And => inputs.iter().all(marked),
        Split::Xor => inputs.iter().any(marked),
    }
}

/// Removes the tokens a start of `task` consumes. The join must be satisfied.
pub fn consume(spec: &WorkflowSpec, task: &str, marking: &mut Marking) -> Vec<String> {
    let Some(t) = spec.task(task) else { return Vec::new() };
    let inputs = input_places(spec, task);
    let taken: Vec<String> = match t.join_type {
        Split::And => inputs,
        Split::Xor => inputs
            .into_iter()
            .find(|p| marking.get(p).copied().unwrap_or(0) > 0)
            .into_iter()
            .collect(),
    };
    for p in &taken {
        take_token(marking, p);
    }
    taken
}

pub fn produce(spec: &WorkflowSpec, task: &str, marking: &mut Marking) {
    for p in output_places(spec, task) {
        *marking.entry(p).or_insert(0) += 1;
    }
}

pub fn restore(marking: &mut Marking, places: &[String]) {
    for p in places {
        *marking.entry(p.clone()).or_insert(0) += 1;
    }
}

fn take_token(marking: &mut Marking, place: &str) {
    if let Some(n) = marking.get_mut(place) {
        *n -= 1;
        if *n == 0 {
            marking.remove(place);
        }
    }
}

pub fn has_end_token(marking: &Marking) -> bool {
    marking.keys().any(|p| p.starts_with("end:"))
}

/// Outcome of the token game after one task finished.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Firing {
    pub marking: Marking,
    /// Tasks that need a fresh enabled work item.
    pub newly_enabled: Vec<String>,
    /// Enabled items whose tokens are gone (lost a deferred choice).
    pub withdrawn: Vec<String>,
    pub status: CaseStatus,
}

/// Given the state of a case (its marking and its work items), decides which
/// enabled items lose their tokens, which tasks become enabled, and the case
/// status that results once that has happened.
pub fn settle<'a>(
    spec: &WorkflowSpec,
    marking: &Marking,
    items: impl IntoIterator<Item = &'a WorkItem>,
) -> Firing {
    let items: Vec<&WorkItem> = items.into_iter().collect();
    let mut withdrawn = Vec::new();
    let mut enabled_tasks: BTreeSet<&str> = BTreeSet::new();
    let mut other_active = false;
    for it in &items {
        match it.state {
            WorkItemState::Enabled if !join_satisfied(spec, &it.task_id, marking) => {
                withdrawn.push(it.id.clone());
            }
            WorkItemState::Enabled => {
                enabled_tasks.insert(&it.task_id);
            }
            WorkItemState::Started | WorkItemState::Suspended => other_active = true,
            _ => {}
        }
    }
    let newly_enabled: Vec<String> = spec
        .tasks
        .iter()
        .filter(|t| !enabled_tasks.contains(t.task_id.as_str()))
        .filter(|t| join_satisfied(spec, &t.task_id, marking))
        .map(|t| t.task_id.clone())
        .collect();
    let active = other_active || !enabled_tasks.is_empty() || !newly_enabled.is_empty();
    let status = if active {
        CaseStatus::Running
    } else if has_end_token(marking) {
        CaseStatus::Completed
    } else {
        CaseStatus::Deadlocked
    };
    Firing { marking: marking.clone(), newly_enabled, withdrawn, status }
}

/// Completes `completed_task` in `case`: produces its output tokens and
/// settles the case. `items` are the case's work items, with the completing
/// item already moved out of the active states.
pub fn fire_token_game<'a>(
    spec: &WorkflowSpec,
    case: &Case,
    completed_task: &str,
    items: impl IntoIterator<Item = &'a WorkItem>,
) -> Firing {
    let mut marking = case.marking.clone();
    produce(spec, completed_task, &mut marking);
    settle(spec, &marking, items)
}
