// Shared by several test targets; each uses a different subset.
#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

use bftflow_core::engine::Operation;
use bftflow_core::gateway::{Call, CallResult, FaultPolicy, ReadMode};
use bftflow_core::model::{CaseId, Edge, Split, TaskDef, TaskKind, TimerDef, WorkflowSpec};
use bftflow_core::sim::{Scenario, Simulation};
use bftflow_core::NodeId;
use bftflow_node::config::{Member, NodeConfig, Timeouts, HASH_FUNCTION};
use bftflow_node::{ApiClient, Runtime};

/// A straight line of user tasks `T0 -> T1 -> ...`, task i owned by `owners[i]`.
pub fn line(spec_id: &str, owners: &[u32]) -> WorkflowSpec {
    let name = |i: usize| format!("T{i}");
    WorkflowSpec {
        spec_id: spec_id.into(),
        version: 1,
        tasks: owners
            .iter()
            .enumerate()
            .map(|(i, o)| TaskDef {
                task_id: name(i),
                assigned_node: NodeId(*o),
                split_type: Split::And,
                join_type: Split::And,
                timer: None,
                kind: TaskKind::User,
            })
            .collect(),
        edges: (1..owners.len()).map(|i| Edge { from: name(i - 1), to: name(i) }).collect(),
        start: vec![name(0)],
        end: vec![name(owners.len() - 1)],
    }
}

pub fn with_timer(mut spec: WorkflowSpec, task: usize, timer: TimerDef) -> WorkflowSpec {
    spec.tasks[task].timer = Some(timer);
    spec
}

pub fn write(op: Operation) -> Call {
    Call::Write { op }
}

pub fn load(spec: WorkflowSpec) -> Call {
    write(Operation::LoadSpecification { spec })
}

pub fn launch(spec_id: &str) -> Call {
    write(Operation::LaunchCase { spec_id: spec_id.into(), version: 1, case_data: Default::default() })
}

pub fn start(item: &str) -> Call {
    write(Operation::StartWorkItem { work_item_id: item.into() })
}

pub fn complete(item: &str) -> Call {
    write(Operation::CompleteWorkItem { work_item_id: item.into(), data: Default::default() })
}

/// Gateway outcomes carry `kind` only when they are errors.
pub fn is_ok(v: &Value) -> bool {
    v.get("kind").is_none()
}

pub fn case_of(v: &Value) -> CaseId {
    CaseId(v["result"]["case"]["caseId"].as_str().expect("case result").parse().expect("numeric case id"))
}

// ---- simulator ----

pub fn sim_cluster(seed: u64, edit: impl FnOnce(&mut Scenario)) -> Simulation {
    let json = format!(r#"{{"nodes": 4, "f": 1, "seed": {seed}, "stop": {{"maxTimeMs": 120000}}}}"#);
    let mut sc = Scenario::from_json(&json).expect("scenario");
    edit(&mut sc);
    Simulation::new(sc).expect("valid scenario")
}

/// Runs until call `id` completes; panics after `limit_ms` of simulated time.
pub fn wait_op(sim: &mut Simulation, id: u64, limit_ms: u64) -> Value {
    let deadline = sim.now() + limit_ms;
    while sim.op(id).expect("known call").completed_at.is_none() {
        assert!(sim.now() < deadline, "call {id} never completed");
        let t = sim.now() + 5;
        sim.run_until(t);
    }
    sim.op(id).unwrap().outcome.clone().unwrap()
}

pub fn settle(sim: &mut Simulation, node: u32, call: Call) -> Value {
    let id = sim.call(NodeId(node), call);
    wait_op(sim, id, 20_000)
}

pub fn advance(sim: &mut Simulation, ms: u64) {
    let t = sim.now() + ms;
    sim.run_until(t);
}

pub fn all_equal<T: PartialEq>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

// ---- real sockets ----

/// Ports the OS handed out a moment ago. Another process could grab one
/// before the node binds it; good enough on a test machine.
pub fn free_addrs(n: usize) -> Vec<SocketAddr> {
    let held: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").expect("bind")).collect();
    held.iter().map(|l| l.local_addr().unwrap()).collect()
}

pub struct LocalCluster {
    pub dir: TempDir,
    pub configs: Vec<NodeConfig>,
    pub nodes: Vec<Option<Runtime>>,
}

pub const OPERATOR_TOKEN: &str = "test-operator";

impl LocalCluster {
    pub fn configs(n: u32, f: u32, dir: &Path) -> Vec<NodeConfig> {
        let addrs = free_addrs(3 * n as usize);
        let members: Vec<Member> = (0..n as usize)
            .map(|i| Member { id: NodeId(i as u32), peer: addrs[3 * i], client: addrs[3 * i + 1], monitor: addrs[3 * i + 2] })
            .collect();
        (0..n)
            .map(|i| NodeConfig {
                node_id: NodeId(i),
                f,
                members: members.clone(),
                initial_view: None,
                cluster_secret: "loopback test cluster".into(),
                operator_key: Some(hex::encode([7u8; 32])),
                operator_token: Some(OPERATOR_TOKEN.into()),
                data_dir: dir.join(format!("node{i}")),
                read_mode: ReadMode::UnorderedConsensus,
                fault_policy: FaultPolicy::FailEarly,
                hash_function: HASH_FUNCTION.into(),
                peers: None,
                audit_interval_ms: None,
                timeouts: Timeouts::default(),
            })
            .collect()
    }

    pub fn start(n: u32, f: u32) -> LocalCluster {
        let dir = tempfile::tempdir().expect("tempdir");
        let configs = Self::configs(n, f, dir.path());
        let nodes = configs.iter().map(|c| Some(Runtime::start(c.clone()).expect("node starts"))).collect();
        LocalCluster { dir, configs, nodes }
    }

    pub fn node(&self, i: usize) -> &Runtime {
        self.nodes[i].as_ref().expect("node is running")
    }

    pub fn client(&self, i: usize) -> ApiClient {
        ApiClient::connect(self.configs[i].me().client).expect("client connects")
    }

    pub fn call(&self, i: usize, call: Call) -> CallResult {
        self.client(i).call(&call).expect("api round trip")
    }

    pub fn stop(&mut self, i: usize) {
        if let Some(rt) = self.nodes[i].take() {
            rt.stop();
        }
    }

    pub fn restart(&mut self, i: usize) {
        self.stop(i);
        self.nodes[i] = Some(Runtime::start(self.configs[i].clone()).expect("node restarts"));
    }

    pub fn head_height(&self, i: usize) -> u64 {
        self.node(i).handle().inspect(|n, _| n.app().chain().head().height).expect("node alive")
    }

    /// Head and engine digest of every running node.
    pub fn fingerprints(&self) -> Vec<(String, String)> {
        self.nodes
            .iter()
            .flatten()
            .map(|rt| {
                rt.handle()
                    .inspect(|n, _| {
                        (n.app().chain().head().hash.to_string(), n.app().engine().digest().to_string())
                    })
                    .expect("node alive")
            })
            .collect()
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for i in 0..self.nodes.len() {
            self.stop(i);
        }
    }
}

/// Polls `cond` until it holds or `limit` passes.
pub fn eventually(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let t = Instant::now();
    while t.elapsed() < limit {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    cond()
}
