//! `bftflow` command line.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 2 | usage error or invalid call |
//! | 3 | visibility violation |
//! | 4 | consensus timeout |
//! | 5 | consensus error (the ordered operation was illegal) |
//! | 6 | chain verification failed |
//! | 7 | file, configuration or scenario problem |
//! | 8 | cannot reach the node |

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use bftflow_core::blockstore::ChainStore;
use bftflow_core::engine::{Operation, ReadQuery};
use bftflow_core::gateway::{Call, GatewayError, GatewayErrorKind, ReadMode};
use bftflow_core::sim::{Scenario, Simulation};
use bftflow_core::NodeId;
use bftflow_node::config::{Member, NodeConfig, Timeouts, HASH_FUNCTION};
use bftflow_node::{ApiClient, Runtime};

#[derive(Parser)]
#[command(name = "bftflow", version, about = "Workflow nodes on a byzantine-fault-tolerant ordered chain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run or manage a node.
    #[command(subcommand)]
    Node(NodeCmd),
    /// Talk to a node's client API.
    #[command(subcommand)]
    Client(ClientCmd),
    /// Inspect a chain on disk.
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Deterministic cluster simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Generate configuration files.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Subcommand)]
enum NodeCmd {
    /// Start a node and serve until killed.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ask a node to wipe its state and rejoin (monitor address).
    Recover {
        #[arg(long)]
        addr: SocketAddr,
        #[arg(long, env = "BFTFLOW_OPERATOR_TOKEN")]
        token: String,
    },
}

#[derive(Subcommand)]
enum ClientCmd {
    /// Submit a write operation (`{"opType": ..., "payload": ...}`).
    Submit {
        op: PathBuf,
        /// Client address of the node.
        #[arg(long)]
        to: SocketAddr,
    },
    /// Run a read query (`{"query": ...}`).
    Read {
        query: PathBuf,
        #[arg(long)]
        to: SocketAddr,
        /// Overrides the node's configured read mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Print the node's status.
    Status {
        #[arg(long)]
        to: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Local,
    Unordered,
    Ordered,
}

impl From<Mode> for ReadMode {
    fn from(m: Mode) -> ReadMode {
        match m {
            Mode::Local => ReadMode::LocalBypass,
            Mode::Unordered => ReadMode::UnorderedConsensus,
            Mode::Ordered => ReadMode::OrderedConsensus,
        }
    }
}

#[derive(Subcommand)]
enum ChainCmd {
    /// Verify the chain backward from its head.
    Verify {
        #[arg(long)]
        data: PathBuf,
    },
    /// Print blocks, from a data directory or a running node's monitor.
    Show {
        #[arg(long, conflicts_with = "addr")]
        data: Option<PathBuf>,
        #[arg(long)]
        addr: Option<SocketAddr>,
        #[arg(long, default_value_t = 1)]
        from: u64,
        #[arg(long, default_value_t = 20)]
        count: u32,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario file and report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON report; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Write one config file per node for a cluster on one host.
    Init {
        #[arg(long, default_value_t = 4)]
        nodes: u32,
        #[arg(long, default_value_t = 1)]
        f: u32,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Peer ports start here; client ports at +100, monitor ports at +200.
        #[arg(long, default_value_t = 7000)]
        base_port: u16,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        secret: Option<String>,
    },
}

/// `println!` that ignores a closed stdout (`| head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// A failure with its exit code.
struct Fail(u8, String);

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Fail {
        Fail(7, format!("{e:#}"))
    }
}

fn connection(e: impl std::fmt::Display, addr: SocketAddr) -> Fail {
    Fail(8, format!("cannot reach {addr}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Fail> {
    match cmd {
        Cmd::Node(NodeCmd::Run { config }) => run_node(&config),
        Cmd::Node(NodeCmd::Recover { addr, token }) => recover(addr, &token),
        Cmd::Client(ClientCmd::Submit { op, to }) => {
            let op: Operation = read_json(&op)?;
            call(to, Call::Write { op })
        }
        Cmd::Client(ClientCmd::Read { query, to, mode }) => {
            let query: ReadQuery = read_json(&query)?;
            call(to, Call::Read { query, mode: mode.map(Into::into) })
        }
        Cmd::Client(ClientCmd::Status { to }) => call(to, Call::NodeStatus),
        Cmd::Chain(ChainCmd::Verify { data }) => verify(&data),
        Cmd::Chain(ChainCmd::Show { data, addr, from, count }) => show(data, addr, from, count),
        Cmd::Sim(SimCmd::Run { scenario, seed, report }) => simulate(&scenario, seed, report.as_deref()),
        Cmd::Config(ConfigCmd::Init { nodes, f, host, base_port, out, secret }) => {
            init(nodes, f, &host, base_port, &out, secret)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Fail> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn print(v: &Value) {
    say!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn run_node(config: &Path) -> Result<(), Fail> {
    let cfg = NodeConfig::load(config)?;
    let rt = Runtime::start(cfg)?;
    say!(
        "node {} running: peer {} client {} monitor http://{}",
        rt.id(),
        rt.peer_addr(),
        rt.client_addr(),
        rt.monitor_addr()
    );
    rt.wait();
    Ok(())
}

fn exit_code(e: &GatewayError) -> u8 {
    match e.kind {
        GatewayErrorKind::VisibilityViolation => 3,
        GatewayErrorKind::ConsensusTimeout => 4,
        GatewayErrorKind::ConsensusError => 5,
        GatewayErrorKind::InvalidCall => 2,
    }
}

fn call(to: SocketAddr, call: Call) -> Result<(), Fail> {
    let mut client = ApiClient::connect(to).map_err(|e| connection(e, to))?;
    match client.call(&call).map_err(|e| connection(e, to))? {
        Ok(v) => {
            print(&v);
            Ok(())
        }
        Err(e) => {
            print(&serde_json::to_value(&e).expect("error serializes"));
            Err(Fail(exit_code(&e), format!("{}: {}", e.code(), e.message)))
        }
    }
}

fn recover(addr: SocketAddr, token: &str) -> Result<(), Fail> {
    let url = format!("http://{addr}/recover");
    match ureq::post(&url).set("X-Operator-Token", token).call() {
        Ok(r) => {
            say!("{} {}", r.status(), r.into_string().unwrap_or_default());
            Ok(())
        }
        Err(ureq::Error::Status(403, _)) => Err(Fail(2, "operator token rejected".into())),
        Err(ureq::Error::Status(code, r)) => Err(Fail(8, format!("{code}: {}", r.into_string().unwrap_or_default()))),
        Err(e) => Err(connection(e, addr)),
    }
}

fn verify(data: &Path) -> Result<(), Fail> {
    let path = data.join("chain.log");
    let (chain, report) = ChainStore::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if report.truncated_bytes > 0 {
        say!("note: {} trailing bytes of a partial record ignored", report.truncated_bytes);
    }
    let v = chain.verify();
    if v.is_ok() {
        say!("{v}");
        Ok(())
    } else {
        Err(Fail(6, v.to_string()))
    }
}

fn show(data: Option<PathBuf>, addr: Option<SocketAddr>, from: u64, count: u32) -> Result<(), Fail> {
    if let Some(addr) = addr {
        let url = format!("http://{addr}/chain/blocks?from={from}&count={count}");
        let body: Value = ureq::get(&url)
            .call()
            .map_err(|e| connection(e, addr))?
            .into_json()
            .map_err(|e| connection(e, addr))?;
        print(&body);
        return Ok(());
    }
    let data = data.unwrap_or_else(|| PathBuf::from("."));
    let path = data.join("chain.log");
    let (chain, _) = ChainStore::load(&path).with_context(|| format!("reading {}", path.display()))?;
    for b in chain.range(from, count) {
        let op: Value = serde_json::from_slice(&b.payload).unwrap_or(Value::Null);
        let kind = op["opType"].as_str().unwrap_or("malformed");
        say!("{:>6} seq {:>6} origin {} {} {}", b.height, b.seq, b.origin, b.hash, kind);
    }
    Ok(())
}

fn simulate(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), Fail> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = Scenario::from_json(&text).map_err(|e| Fail(7, format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let sim = Simulation::new(sc).map_err(|e| Fail(7, e.to_string()))?;
    let report = sim.run();
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(p) => {
            std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
            eprintln!(
                "{}: seed {} ended at {} ms, quiescent {}, heads equal {}, digests equal {}, liveness lost {}, trace {}",
                report.name,
                report.seed,
                report.end_ms,
                report.quiescent,
                report.live_heads_equal,
                report.live_digests_equal,
                report.liveness_lost,
                report.trace_hash
            );
            for n in &report.nodes {
                eprintln!(
                    "  node {} live {} height {} view {} digest {}",
                    n.node, n.live, n.head.height, n.view, n.engine_digest
                );
            }
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn init(nodes: u32, f: u32, host: &str, base: u16, out: &Path, secret: Option<String>) -> Result<(), Fail> {
    let addr = |port: u32| -> Result<SocketAddr, Fail> {
        format!("{host}:{port}").parse().map_err(|e| Fail(2, format!("bad host {host}: {e}")))
    };
    let members = (0..nodes)
        .map(|i| {
            let p = base as u32 + i;
            Ok(Member { id: NodeId(i), peer: addr(p)?, client: addr(p + 100)?, monitor: addr(p + 200)? })
        })
        .collect::<Result<Vec<_>, Fail>>()?;
    let seed = bftflow_core::Digest::of_parts(&[b"bftflow config", out.to_string_lossy().as_bytes()]);
    let secret = secret.unwrap_or_else(|| hex::encode(seed.0));
    let operator_key = hex::encode(bftflow_core::Digest::of_parts(&[b"operator", secret.as_bytes()]).0);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..nodes {
        let cfg = NodeConfig {
            node_id: NodeId(i),
            f,
            members: members.clone(),
            initial_view: None,
            cluster_secret: secret.clone(),
            operator_key: Some(operator_key.clone()),
            operator_token: Some(format!("operator-{}", &operator_key[..16])),
            data_dir: PathBuf::from(format!("node{i}")),
            read_mode: ReadMode::UnorderedConsensus,
            fault_policy: bftflow_core::gateway::FaultPolicy::FailEarly,
            hash_function: HASH_FUNCTION.into(),
            peers: None,
            audit_interval_ms: None,
            timeouts: Timeouts::default(),
        };
        cfg.validate()?;
        let path = out.join(format!("node{i}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).expect("config serializes"))
            .with_context(|| format!("writing {}", path.display()))?;
        say!("{}", path.display());
    }
    Ok(())
}
