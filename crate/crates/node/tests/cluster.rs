//! Four in-process nodes talking over loopback TCP.

mod common;

use std::time::Duration;

use serde_json::Value;

use bftflow_core::engine::ReadQuery;
use bftflow_core::gateway::{Call, GatewayErrorKind, ReadMode};

use common::*;

fn get(addr: std::net::SocketAddr, path: &str) -> (u16, Value) {
    match ureq::get(&format!("http://{addr}{path}")).call() {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("GET {path}: {e}"),
    }
}

fn post_recover(addr: std::net::SocketAddr, token: Option<&str>) -> u16 {
    let mut req = ureq::post(&format!("http://{addr}/recover"));
    if let Some(t) = token {
        req = req.set("X-Operator-Token", t);
    }
    match req.call() {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(code, _)) => code,
        Err(e) => panic!("POST /recover: {e}"),
    }
}

fn converged(c: &LocalCluster) -> bool {
    all_equal(&c.fingerprints())
}

#[test]
fn writes_order_everywhere_and_reads_agree() {
    let c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    let r = c.call(0, launch("seq")).unwrap();
    let case = case_of(&r);
    let r = c.call(0, start(&format!("{case}.T0.1"))).unwrap();
    assert_eq!(r["result"]["workItem"]["state"], "Started", "{r}");

    assert!(eventually(Duration::from_secs(5), || converged(&c)));
    assert!((0..4).all(|i| c.head_height(i) == 3));

    let q = ReadQuery::ListCases;
    let modes = [ReadMode::LocalBypass, ReadMode::UnorderedConsensus, ReadMode::OrderedConsensus];
    let answers: Vec<Value> =
        modes.into_iter().map(|m| c.call(3, Call::Read { query: q.clone(), mode: Some(m) }).unwrap()).collect();
    assert_eq!(answers[0].as_array().unwrap().len(), 1);
    assert!(all_equal(&answers));
}

#[test]
fn foreign_and_illegal_writes_are_refused() {
    let c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    let case = case_of(&c.call(0, launch("seq")).unwrap());
    let item = format!("{case}.T0.1");

    let e = c.call(1, start(&item)).unwrap_err();
    assert_eq!(e.kind, GatewayErrorKind::VisibilityViolation);

    // Completing before starting is legal to submit but illegal to apply:
    // it is ordered, stored, and reported as a consensus error.
    let e = c.call(0, complete(&item)).unwrap_err();
    assert_eq!(e.kind, GatewayErrorKind::ConsensusError, "{e:?}");
    assert!(eventually(Duration::from_secs(5), || converged(&c)));
    assert_eq!(c.head_height(2), 3);
}

#[test]
fn monitor_reports_and_recover_requires_the_token() {
    let c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    assert!(eventually(Duration::from_secs(5), || converged(&c)));
    let m = c.node(2).monitor_addr();

    let (code, view) = get(m, "/view");
    assert_eq!(code, 200);
    assert_eq!(view["viewNumber"], 0);
    assert_eq!(view["leader"], 0);
    assert_eq!(view["members"].as_array().unwrap().len(), 4);

    let (_, head) = get(m, "/chain/head");
    assert_eq!(head["head"]["height"], 1);
    let hash = head["head"]["hash"].as_str().unwrap().to_string();
    let (code, block) = get(m, &format!("/block/{hash}"));
    assert_eq!(code, 200);
    assert_eq!(block["operation"]["opType"], "LoadSpecification");
    assert_eq!(get(m, &format!("/block/{}", "0".repeat(64))).0, 404);
    assert_eq!(get(m, "/block/nothex").0, 400);
    assert_eq!(get(m, "/nowhere").0, 404);

    let (_, blocks) = get(m, "/chain/blocks?from=1&count=10");
    assert_eq!(blocks["blocks"].as_array().unwrap().len(), 1);

    let (_, d) = get(m, "/engine/digest");
    assert_eq!(d["appliedCount"], 1);

    assert_eq!(post_recover(m, None), 403);
    assert_eq!(post_recover(m, Some("wrong")), 403);
    assert_eq!(post_recover(m, Some(OPERATOR_TOKEN)), 202);
    assert!(eventually(Duration::from_secs(10), || converged(&c) && c.head_height(2) == 1));
}

#[test]
fn restarted_cluster_resumes_at_the_same_head() {
    let mut c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    for _ in 0..5 {
        c.call(1, launch("seq")).unwrap();
    }
    assert!(eventually(Duration::from_secs(5), || converged(&c)));
    let before = c.fingerprints();
    for i in 0..4 {
        c.restart(i);
    }
    assert_eq!(c.fingerprints(), before);
    let r = c.call(2, launch("seq")).unwrap();
    assert_eq!(r["result"]["case"]["caseId"], "7", "{r}");
    assert!(eventually(Duration::from_secs(5), || converged(&c)));
    assert!((0..4).all(|i| c.head_height(i) == 7));
}

#[test]
fn a_restarted_backup_catches_up() {
    let mut c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    c.stop(3);
    for _ in 0..10 {
        c.call(0, launch("seq")).unwrap();
    }
    c.restart(3);
    assert!(eventually(Duration::from_secs(10), || c.head_height(3) == 11));
    assert!(eventually(Duration::from_secs(5), || converged(&c)));
}
