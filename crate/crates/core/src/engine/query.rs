//! Read-only queries over the engine state.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical;
use crate::model::{CaseId, NodeId};

use super::types::{CaseView, EngineError, ErrorCode, WorkItemState};
use super::Engine;

/// The supported subset of global reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ReadQuery {
    ListSpecifications,
    ListCases,
    CaseState { case_id: CaseId },
    CaseData { case_id: CaseId },
    ListWorkItems {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<WorkItemState>,
    },
    GetWorkItem { work_item_id: String },
    /// Engine digest and last applied block; used for self-audits.
    EngineDigest,
}

/// A query answer. Its canonical bytes are what replicas compare.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum QueryResult {
    Ok(Value),
    Error(EngineError),
}

impl QueryResult {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_bytes(self)
    }
}

impl Engine {
    /// Answers a query without any local time fields.
    pub fn query(&self, q: &ReadQuery) -> QueryResult {
        match self.answer(q) {
            Ok(v) => QueryResult::Ok(v),
            Err(e) => QueryResult::Error(e),
        }
    }

    /// Same as [`Engine::query`] with this node's timestamps attached to
    /// every work item in the answer.
    pub fn query_with_times(&self, q: &ReadQuery) -> QueryResult {
        match self.query(q) {
            QueryResult::Ok(mut v) => {
                self.attach_times(&mut v);
                QueryResult::Ok(v)
            }
            err => err,
        }
    }

    /// Adds time fields to every object that looks like a work item.
    pub fn attach_times(&self, v: &mut Value) {
        match v {
            Value::Array(items) => items.iter_mut().for_each(|i| self.attach_times(i)),
            Value::Object(map) => {
                let is_item = map.contains_key("taskId") && map.contains_key("assignedNode");
                if is_item {
                    if let Some(id) = map.get("id").and_then(Value::as_str).map(str::to_owned) {
                        let t = self.times(&id);
                        let opt = |x: Option<u64>| x.map(Value::from).unwrap_or(Value::Null);
                        map.insert("enablementTime".into(), opt(t.enablement_time));
                        map.insert("startTime".into(), opt(t.start_time));
                        map.insert("completionTime".into(), opt(t.completion_time));
                    }
                } else {
                    map.values_mut().for_each(|i| self.attach_times(i));
                }
            }
            _ => {}
        }
    }

    fn answer(&self, q: &ReadQuery) -> Result<Value, EngineError> {
        let s = self.state();
        let unknown_case = |c: &CaseId| EngineError::new(ErrorCode::UnknownId, format!("case {c}"));
        Ok(match q {
            ReadQuery::ListSpecifications => {
                Value::Array(s.specs.values().map(|sp| serde_json::to_value(sp.key()).expect("key")).collect())
            }
            ReadQuery::ListCases => Value::Array(
                s.cases.values().map(|c| serde_json::to_value(CaseView::from(c)).expect("view")).collect(),
            ),
            ReadQuery::CaseState { case_id } => {
                let c = s.cases.get(case_id).ok_or_else(|| unknown_case(case_id))?;
                json!({ "caseId": c.id, "status": c.status, "marking": c.marking })
            }
            ReadQuery::CaseData { case_id } => {
                let c = s.cases.get(case_id).ok_or_else(|| unknown_case(case_id))?;
                serde_json::to_value(&c.case_data).expect("map")
            }
            ReadQuery::ListWorkItems { node, state } => Value::Array(
                s.work_items
                    .values()
                    .filter(|i| node.is_none_or(|n| i.assigned_node == n))
                    .filter(|i| state.is_none_or(|st| i.state == st))
                    .map(|i| serde_json::to_value(i).expect("item"))
                    .collect(),
            ),
            ReadQuery::GetWorkItem { work_item_id } => {
                let i = s.work_items.get(work_item_id).ok_or_else(|| {
                    EngineError::new(ErrorCode::UnknownId, format!("work item {work_item_id}"))
                })?;
                serde_json::to_value(i).expect("item")
            }
            ReadQuery::EngineDigest => json!({
                "digest": self.digest(),
                "lastBlockHash": s.last_block_hash,
                "appliedCount": s.applied_count,
            }),
        })
    }
}
