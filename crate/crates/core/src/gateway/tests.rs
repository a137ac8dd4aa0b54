use super::*;
use crate::engine::{CaseStatus, ErrorCode, WorkItemState};
use crate::model::CaseId;
use crate::model::fixtures::sequence3;
use crate::sim::{Scenario, Simulation};

fn cluster(seed: u64) -> Simulation {
    cluster_with(seed, |_| {})
}

/// Every message in these runs also goes through its byte encoding.
fn cluster_with(seed: u64, edit: impl FnOnce(&mut Scenario)) -> Simulation {
    let json = format!(r#"{{"nodes": 4, "f": 1, "seed": {seed}, "stop": {{"maxTimeMs": 60000}}}}"#);
    let mut sc = Scenario::from_json(&json).unwrap();
    edit(&mut sc);
    let mut sim = Simulation::new(sc).unwrap();
    sim.check_encoding(true);
    sim
}

fn write(op: Operation) -> Call {
    Call::Write { op }
}

fn read(query: ReadQuery, mode: Option<ReadMode>) -> Call {
    Call::Read { query, mode }
}

/// Runs a call to completion and returns its outcome.
fn settle(sim: &mut Simulation, node: u32, call: Call) -> Value {
    let id = sim.call(NodeId(node), call);
    let deadline = sim.now() + 10_000;
    while sim.op(id).unwrap().completed_at.is_none() {
        assert!(sim.now() < deadline, "call {id} never completed");
        let t = sim.now() + 10;
        sim.run_until(t);
    }
    let op = sim.op(id).unwrap();
    op.outcome.clone().unwrap()
}

fn ok(v: &Value) -> bool {
    v.get("kind").is_none()
}

/// Loads the A(0) -> B(1) -> C(2) sequence and launches one case from node 0.
fn with_case(sim: &mut Simulation) -> CaseId {
    let r = settle(sim, 0, write(Operation::LoadSpecification { spec: sequence3() }));
    assert!(ok(&r), "{r}");
    let r = settle(
        sim,
        0,
        write(Operation::LaunchCase { spec_id: "seq".into(), version: 1, case_data: Default::default() }),
    );
    assert!(ok(&r), "{r}");
    CaseId(r["result"]["case"]["caseId"].as_str().unwrap().parse().unwrap())
}

fn settle_all(sim: &mut Simulation, ms: u64) {
    let t = sim.now() + ms;
    sim.run_until(t);
}

fn heights(sim: &Simulation) -> Vec<u64> {
    sim.live_nodes().map(|n| n.app().chain().head().height).collect()
}

fn digests(sim: &Simulation) -> Vec<Digest> {
    sim.live_nodes().map(|n| n.app().engine().digest()).collect()
}

#[test]
fn every_call_has_exactly_one_class() {
    use crate::gateway::classify::{CALLS, classify};
    let ops = [
        "LoadSpecification",
        "UnloadSpecification",
        "LaunchCase",
        "CancelCase",
        "StartWorkItem",
        "CompleteWorkItem",
        "SuspendWorkItem",
        "UnsuspendWorkItem",
        "RollbackWorkItem",
        "SkipWorkItem",
        "CancelWorkItem",
        "TimerExpiry",
        "DelayedLaunchFire",
    ];
    for op in ops {
        assert_eq!(classify(op), Some(CallClass { locality: Locality::Global, mutation: Mutation::Write }));
    }
    let reads = ["listSpecifications", "listCases", "caseState", "caseData", "listWorkItems", "getWorkItem", "engineDigest"];
    for q in reads {
        assert_eq!(classify(q), Some(CallClass { locality: Locality::Global, mutation: Mutation::Read }));
    }
    for local in ["ScheduleLaunch", "RegisterService", "RetrieveServices", "NodeStatus"] {
        assert_eq!(classify(local).unwrap().locality, Locality::Local);
    }
    let mut names: Vec<&str> = CALLS.iter().map(|(n, _)| *n).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), CALLS.len());
    assert_eq!(CALLS.len(), ops.len() + reads.len() + 4);
    assert_eq!(classify("DropTables"), None);
}

#[test]
fn foreign_item_is_refused_before_ordering() {
    let mut sim = cluster(1);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let before = heights(&sim);
    let r = settle(&mut sim, 1, write(Operation::StartWorkItem { work_item_id: format!("{case}.A.1") }));
    assert_eq!(r["kind"], "visibility-violation", "{r}");
    settle_all(&mut sim, 2_000);
    assert_eq!(heights(&sim), before);
    assert_eq!(sim.node(NodeId(1)).unwrap().stats().writes, 0);
}

#[test]
fn bypassing_the_check_lands_on_chain_but_changes_nothing() {
    let mut sim = cluster(2);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let item = format!("{case}.A.1");
    let wop = WorkflowOperation::new(Operation::StartWorkItem { work_item_id: item.clone() }, NodeId(1), "evil-1");
    let now = sim.now();
    sim.node_mut(NodeId(1)).unwrap().submit_unchecked(None, wop, now);
    // The node's output is routed on the next delivery or wake-up.
    sim.call(NodeId(1), Call::NodeStatus);
    settle_all(&mut sim, 3_000);
    assert!(heights(&sim).iter().all(|h| *h == 3), "{:?}", heights(&sim));
    for n in sim.live_nodes() {
        let engine = n.app().engine();
        assert_eq!(engine.state().work_items[&item].state, WorkItemState::Enabled);
        let code = n.app().result_at(3).and_then(|r| r.error_code());
        assert_eq!(code, Some(ErrorCode::VisibilityViolation));
        assert!(n.verify_chain().is_ok());
    }
    let d = digests(&sim);
    assert!(d.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn the_three_read_modes_answer_alike_on_a_healthy_cluster() {
    let mut sim = cluster(3);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let q = ReadQuery::CaseState { case_id: case };
    let answers: Vec<Value> = [ReadMode::LocalBypass, ReadMode::UnorderedConsensus, ReadMode::OrderedConsensus]
        .into_iter()
        .map(|m| settle(&mut sim, 2, read(q.clone(), Some(m))))
        .collect();
    assert!(ok(&answers[0]), "{}", answers[0]);
    assert_eq!(answers[0], answers[1]);
    assert_eq!(answers[1], answers[2]);
    // Ordered reads take a sequence number but never a block.
    assert_eq!(heights(&sim), vec![2; 4]);
    assert!(sim.node(NodeId(2)).unwrap().divergences().is_empty());
}

#[test]
fn local_reads_are_answered_without_the_network() {
    let mut sim = cluster(4);
    with_case(&mut sim);
    settle_all(&mut sim, 500);
    let id = sim.call(NodeId(3), read(ReadQuery::ListCases, Some(ReadMode::LocalBypass)));
    let op = sim.op(id).unwrap();
    assert_eq!(op.latency_ms, Some(0));
    assert_eq!(op.outcome.as_ref().unwrap().as_array().unwrap().len(), 1);
}

fn corrupt(sim: &mut Simulation, node: u32, item: &str) {
    let n = sim.node_mut(NodeId(node)).unwrap();
    n.app_mut().engine_mut().state_mut().work_items.get_mut(item).unwrap().state = WorkItemState::Cancelled;
}

#[test]
fn fail_early_node_detects_divergence_and_recovers() {
    let mut sim = cluster(5);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let item = format!("{case}.A.1");
    corrupt(&mut sim, 2, &item);
    assert_ne!(digests(&sim)[2], digests(&sim)[0]);
    let local = settle(&mut sim, 2, read(ReadQuery::GetWorkItem { work_item_id: item.clone() }, Some(ReadMode::LocalBypass)));
    assert_eq!(local["state"], "Cancelled", "{local}");
    settle_all(&mut sim, 5_000);
    let n2 = sim.node(NodeId(2)).unwrap();
    assert_eq!(n2.stats().recoveries, 1);
    assert_eq!(n2.divergences().len(), 1);
    assert!(n2.is_ready());
    let d = digests(&sim);
    assert!(d.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(heights(&sim), vec![2; 4]);
    // The repaired node serves its work again.
    let fixed = settle(&mut sim, 2, read(ReadQuery::GetWorkItem { work_item_id: item }, Some(ReadMode::LocalBypass)));
    assert_eq!(fixed["state"], "Enabled");
}

#[test]
fn consensus_read_on_a_diverged_node_returns_the_quorum_answer() {
    let mut sim = cluster(6);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let item = format!("{case}.A.1");
    corrupt(&mut sim, 3, &item);
    let r = settle(&mut sim, 3, read(ReadQuery::GetWorkItem { work_item_id: item }, Some(ReadMode::UnorderedConsensus)));
    assert_eq!(r["state"], "Enabled", "{r}");
    settle_all(&mut sim, 5_000);
    assert_eq!(sim.node(NodeId(3)).unwrap().stats().recoveries, 1);
}

#[test]
fn keep_operating_node_serves_its_corrupted_state() {
    let mut sim = cluster_with(7, |s| s.fault_policy = FaultPolicy::KeepOperating);
    let case = with_case(&mut sim);
    settle_all(&mut sim, 500);
    let item = format!("{case}.A.1");
    corrupt(&mut sim, 2, &item);
    let r = settle(&mut sim, 2, read(ReadQuery::GetWorkItem { work_item_id: item }, Some(ReadMode::LocalBypass)));
    assert_eq!(r["state"], "Cancelled");
    settle_all(&mut sim, 5_000);
    let n2 = sim.node(NodeId(2)).unwrap();
    assert_eq!(n2.stats().recoveries, 0);
    assert_ne!(n2.app().engine().digest(), sim.node(NodeId(0)).unwrap().app().engine().digest());
}

#[test]
fn lagging_node_catches_up_by_snapshot_after_restart() {
    let launch = || write(Operation::LaunchCase { spec_id: "seq".into(), version: 1, case_data: Default::default() });
    let mut sim = cluster_with(8, |s| {
        s.faults.push(crate::sim::Fault {
            target: NodeId(3),
            kind: crate::sim::FaultKind::DropLinks { probability: 1.0, window: crate::sim::Window { from: 0, until: Some(8_000) } },
        });
    });
    let r = settle(&mut sim, 0, write(Operation::LoadSpecification { spec: sequence3() }));
    assert!(ok(&r));
    for _ in 0..100 {
        let r = settle(&mut sim, 0, launch());
        assert!(ok(&r), "{r}");
    }
    assert_eq!(sim.node(NodeId(3)).unwrap().app().chain().head().height, 0);
    sim.run_until(20_000);
    let n3 = sim.node(NodeId(3)).unwrap();
    assert_eq!(n3.app().chain().head().height, 101);
    assert!(n3.app().stats().snapshots_installed >= 1 || n3.app().stats().blocks_fetched >= 16, "{:?}", n3.app().stats());
    let d = digests(&sim);
    assert!(d.windows(2).all(|w| w[0] == w[1]));
    let cases = &n3.app().engine().state().cases;
    assert_eq!(cases.len(), 100);
    assert!(cases.values().all(|c| c.status == CaseStatus::Running));
}

#[test]
fn install_gives_up_on_an_evicted_snapshot_and_takes_a_newer_one() {
    let launch = || write(Operation::LaunchCase { spec_id: "seq".into(), version: 1, case_data: Default::default() });
    let mut sim = cluster_with(8, |s| {
        s.faults.push(crate::sim::Fault {
            target: NodeId(3),
            kind: crate::sim::FaultKind::DropLinks { probability: 1.0, window: crate::sim::Window { from: 0, until: Some(8_000) } },
        });
    });
    assert!(ok(&settle(&mut sim, 0, write(Operation::LoadSpecification { spec: sequence3() }))));
    for _ in 0..100 {
        assert!(ok(&settle(&mut sim, 0, launch())));
    }
    assert!(sim.now() < 8_000);
    // The only checkpoint node 3 can be offered now has no snapshot anywhere.
    for i in 0..3 {
        sim.node_mut(NodeId(i)).unwrap().app_mut().forget_snapshots();
    }
    sim.run_until(12_000);
    assert_eq!(sim.node(NodeId(3)).unwrap().app().engine().applied_count(), 0);
    for _ in 0..64 {
        assert!(ok(&settle(&mut sim, 0, launch())));
    }
    settle_all(&mut sim, 10_000);
    assert_eq!(heights(&sim), vec![165; 4]);
    assert!(all_same(&digests(&sim)));
    assert!(sim.node(NodeId(3)).unwrap().app().stats().snapshots_installed >= 1);
}

#[test]
fn restart_resumes_from_disk() {
    let mut sim = cluster_with(9, |s| {
        s.steps.push(crate::sim::Step { at: 2_000, action: crate::sim::Action::Restart { node: NodeId(1), down_ms: 1_000 } });
    });
    with_case(&mut sim);
    sim.run_until(2_500);
    assert!(sim.live_nodes().all(|n| n.id() != NodeId(1)));
    let r = settle(&mut sim, 0, write(Operation::StartWorkItem { work_item_id: "2.A.1".into() }));
    assert!(ok(&r), "{r}");
    sim.run_until(8_000);
    let n1 = sim.node(NodeId(1)).unwrap();
    assert_eq!(n1.startup_report().chain_height, 2);
    assert_eq!(n1.app().chain().head().height, 3);
    let d = digests(&sim);
    assert!(d.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn tampered_envelope_is_refused() {
    let a = KeyRing::from_secret(NodeId(0), b"s");
    let b = KeyRing::from_secret(NodeId(1), b"s");
    let outsider = KeyRing::from_secret(NodeId(0), b"other");
    let msg = Wire::SnapshotRequest { seq: 64 };
    let env = Envelope::seal(&a, NodeId(1), msg.clone()).unwrap();
    assert_eq!(Envelope::open(&b, &env.to_bytes()).unwrap().body, msg);

    let mut forged = env.clone();
    forged.body = Wire::SnapshotRequest { seq: 128 };
    assert_eq!(Envelope::open(&b, &forged.to_bytes()), Err(EnvelopeError::BadTag(NodeId(0))));

    let mut spoofed = env.clone();
    spoofed.from = NodeId(2);
    assert_eq!(Envelope::open(&b, &spoofed.to_bytes()), Err(EnvelopeError::BadTag(NodeId(2))));

    let foreign = Envelope::seal(&outsider, NodeId(1), msg).unwrap();
    assert!(Envelope::open(&b, &foreign.to_bytes()).is_err());
    assert_eq!(Envelope::open(&a, &env.to_bytes()), Err(EnvelopeError::WrongRecipient(NodeId(1))));
    assert!(matches!(Envelope::open(&b, b"{"), Err(EnvelopeError::Malformed(_))));
}

#[test]
fn local_calls_stay_local() {
    let mut sim = cluster(10);
    settle_all(&mut sim, 100);
    let r = settle(&mut sim, 2, Call::RegisterService { name: "mail".into(), url: "smtp://x".into() });
    assert_eq!(r["registered"], "mail");
    let r = settle(&mut sim, 2, Call::RetrieveServices);
    assert_eq!(r["mail"], "smtp://x");
    let r = settle(&mut sim, 1, Call::RetrieveServices);
    assert_eq!(r, json!({}));
    assert_eq!(heights(&sim), vec![0; 4]);
}

#[test]
fn scheduled_launch_fires_once_everywhere() {
    let mut sim = cluster(11);
    with_case(&mut sim);
    let r = settle(
        &mut sim,
        1,
        Call::ScheduleLaunch { spec_id: "seq".into(), version: 1, case_data: Default::default(), delay_ms: 1_000 },
    );
    assert_eq!(r["scheduled"], true);
    settle_all(&mut sim, 600);
    assert_eq!(heights(&sim), vec![2; 4]);
    settle_all(&mut sim, 2_000);
    assert_eq!(heights(&sim), vec![3; 4]);
    for n in sim.live_nodes() {
        assert_eq!(n.app().engine().state().cases.len(), 2);
    }
}

#[test]
fn whole_cluster_restart_keeps_sequence_numbers_moving_forward() {
    let mut sim = cluster_with(12, |s| {
        for n in 0..4 {
            s.steps.push(crate::sim::Step { at: 3_000, action: crate::sim::Action::Restart { node: NodeId(n), down_ms: 500 } });
        }
    });
    let case = with_case(&mut sim);
    sim.run_until(4_000);
    assert_eq!(heights(&sim), vec![2; 4]);
    // Restored replicas resume after the chain head, not at checkpoint 0.
    let r = settle(&mut sim, 0, write(Operation::StartWorkItem { work_item_id: format!("{case}.A.1") }));
    assert!(ok(&r), "{r}");
    settle_all(&mut sim, 2_000);
    assert_eq!(heights(&sim), vec![3; 4]);
    for n in sim.live_nodes() {
        let seqs: Vec<u64> = n.app().chain().iter().map(|b| b.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
    }
    assert!(all_same(&digests(&sim)));
}

fn all_same(d: &[Digest]) -> bool {
    d.windows(2).all(|w| w[0] == w[1])
}
