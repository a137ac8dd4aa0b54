//! The `bftflow` binary: exit codes and file handling.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use bftflow_core::blockstore::ChainStore;
use bftflow_core::NodeId;
use bftflow_node::NodeConfig;

use common::*;

fn bftflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bftflow")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_chain(dir: &Path, n: u64) {
    let (mut s, _) = ChainStore::open(dir.join("chain.log")).unwrap();
    for i in 1..=n {
        s.append_ordered(i, i * 2, format!("{{\"n\":{i}}}").into_bytes(), NodeId(1)).unwrap();
    }
}

#[test]
fn chain_verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    write_chain(dir.path(), 5);
    let o = bftflow(&["chain", "verify", "--data", d]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("height=5"), "{}", stdout(&o));

    let o = bftflow(&["chain", "show", "--data", d, "--from", "2", "--count", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 2);

    // Flip the last byte of the file: block 5's stored hash.
    let path = dir.path().join("chain.log");
    let mut bytes = std::fs::read(&path).unwrap();
    *bytes.last_mut().unwrap() ^= 0x80;
    std::fs::write(&path, bytes).unwrap();
    let o = bftflow(&["chain", "verify", "--data", d]);
    assert_eq!(code(&o), 6);
    assert!(String::from_utf8_lossy(&o.stderr).contains("height 5"));

    let o = bftflow(&["chain", "verify", "--data", "/definitely/not/here"]);
    assert_eq!(code(&o), 7);
}

#[test]
fn config_init_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = bftflow(&["config", "init", "--nodes", "4", "--f", "1", "--base-port", "19000", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfgs: Vec<NodeConfig> =
        (0..4).map(|i| NodeConfig::load(&dir.path().join(format!("node{i}.json"))).unwrap()).collect();
    assert_eq!(cfgs[3].node_id, NodeId(3));
    assert_eq!(cfgs[3].me().client.port(), 19103);
    assert!(cfgs.iter().all(|c| c.cluster_secret == cfgs[0].cluster_secret));
    assert!(cfgs[0].data_dir.is_absolute());

    // Three nodes cannot tolerate one fault.
    let o = bftflow(&["config", "init", "--nodes", "3", "--f", "1", "--out", out]);
    assert_eq!(code(&o), 7);
}

#[test]
fn sim_run_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    std::fs::write(
        &scenario,
        r#"{"name": "idle", "nodes": 4, "f": 1, "seed": 5,
            "faults": [{"target": 2, "kind": "crash", "at": 10}],
            "stop": {"maxTimeMs": 2000}}"#,
    )
    .unwrap();
    let report = dir.path().join("r.json");
    let o = bftflow(&["sim", "run", scenario.to_str().unwrap(), "--seed", "9", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["seed"], 9);
    assert_eq!(r["nodes"][2]["live"], false);

    std::fs::write(&scenario, r#"{"nodes": 3, "f": 1, "stop": {"maxTimeMs": 10}}"#).unwrap();
    assert_eq!(code(&bftflow(&["sim", "run", scenario.to_str().unwrap()])), 7);
}

#[test]
fn client_exit_codes_follow_the_error_kind() {
    let c = LocalCluster::start(4, 1);
    c.call(0, load(line("seq", &[0, 1, 2]))).unwrap();
    let case = case_of(&c.call(0, launch("seq")).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let op = dir.path().join("op.json");
    let body = format!(r#"{{"opType": "StartWorkItem", "payload": {{"workItemId": "{case}.T0.1"}}}}"#);
    std::fs::write(&op, body).unwrap();
    let op = op.to_str().unwrap();
    let to = |i: usize| c.configs[i].me().client.to_string();

    assert_eq!(code(&bftflow(&["client", "submit", op, "--to", &to(1)])), 3);
    let o = bftflow(&["client", "submit", op, "--to", &to(0)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Starting it twice is ordered and then refused by every engine.
    assert_eq!(code(&bftflow(&["client", "submit", op, "--to", &to(0)])), 5);

    let q = dir.path().join("q.json");
    std::fs::write(&q, r#"{"query": "listCases"}"#).unwrap();
    let o = bftflow(&["client", "read", q.to_str().unwrap(), "--to", &to(2), "--mode", "ordered"]);
    assert_eq!(code(&o), 0);
    let cases: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cases.as_array().unwrap().len(), 1);

    let nobody = free_addrs(1)[0].to_string();
    assert_eq!(code(&bftflow(&["client", "status", "--to", &nobody])), 8);
}

#[test]
fn shipped_scenario_ends_converged() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/leader-restart.json");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = bftflow(&["sim", "run", path.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["liveDigestsEqual"], true);
    assert_eq!(r["nodes"][2]["gateway"]["recoveries"], 1);
}
