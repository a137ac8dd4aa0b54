//! One node on real sockets and the wall clock.
//!
//! A single thread owns the [`Node`] and handles everything in arrival
//! order: peer messages, client calls, monitor inspections and deadlines.
//! Other threads only talk to it through the input channel.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::Context;

use bftflow_core::gateway::{Call, CallResult, Disk, Node, Wire};
use bftflow_core::NodeId;

use crate::api::ApiServer;
use crate::config::NodeConfig;
use crate::monitor::Monitor;
use crate::transport::Transport;

/// Longest the loop sleeps without a deadline; bounds clock-skew surprises.
const IDLE_WAKE: Duration = Duration::from_millis(250);
/// Inputs handled before output is routed.
const BATCH: usize = 512;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

type Reply = Box<dyn FnOnce(CallResult) + Send>;
type Inspection = Box<dyn FnOnce(&mut Node, u64) + Send>;

pub enum Input {
    Network(NodeId, Wire),
    Call(Call, Reply),
    Inspect(Inspection),
    Stop,
}

/// Cheap handle for feeding the node thread.
#[derive(Clone)]
pub struct Handle {
    tx: Sender<Input>,
}

impl Handle {
    pub fn submit(&self, call: Call, reply: impl FnOnce(CallResult) + Send + 'static) -> bool {
        self.tx.send(Input::Call(call, Box::new(reply))).is_ok()
    }

    /// Blocks until the call completes. `None` if the node stopped.
    pub fn call(&self, call: Call) -> Option<CallResult> {
        let (tx, rx) = mpsc::channel();
        self.submit(call, move |r| {
            let _ = tx.send(r);
        });
        rx.recv().ok()
    }

    /// Runs `f` on the node thread between events.
    pub fn inspect<R: Send + 'static>(&self, f: impl FnOnce(&mut Node, u64) -> R + Send + 'static) -> Option<R> {
        let (tx, rx) = mpsc::channel();
        let sent = self.tx.send(Input::Inspect(Box::new(move |n, now| {
            let _ = tx.send(f(n, now));
        })));
        sent.ok()?;
        rx.recv().ok()
    }
}

pub struct Runtime {
    id: NodeId,
    handle: Handle,
    thread: Option<JoinHandle<Disk>>,
    transport: Arc<Transport>,
    peer_addr: SocketAddr,
    client_addr: SocketAddr,
    monitor_addr: SocketAddr,
    monitor: Option<Monitor>,
    api: ApiServer,
}

impl Runtime {
    /// Opens storage, binds all three listeners and starts the node thread.
    pub fn start(cfg: NodeConfig) -> anyhow::Result<Runtime> {
        let me = cfg.me().clone();
        let settings = cfg.settings()?;
        let view = cfg.view().map_err(|e| anyhow::anyhow!("{e}"))?;
        let (disk, report) = Disk::open(&cfg.data_dir).with_context(|| format!("opening {}", cfg.data_dir.display()))?;
        if report.truncated_bytes > 0 || !report.damaged.is_empty() {
            eprintln!(
                "node {}: chain log repaired on open ({} trailing bytes cut, damaged heights {:?})",
                cfg.node_id, report.truncated_bytes, report.damaged
            );
        }
        let peer_listener = TcpListener::bind(me.peer).with_context(|| format!("binding peer port {}", me.peer))?;
        let client_listener =
            TcpListener::bind(me.client).with_context(|| format!("binding client port {}", me.client))?;
        let peer_addr = peer_listener.local_addr()?;
        let client_addr = client_listener.local_addr()?;

        let book: BTreeMap<NodeId, SocketAddr> = cfg.members.iter().map(|m| (m.id, m.peer)).collect();
        let transport = Arc::new(Transport::new(cfg.keys(), book));
        let (tx, rx) = mpsc::channel();
        let handle = Handle { tx: tx.clone() };

        let node = Node::start(cfg.node_id, cfg.keys(), view, settings, disk, now_ms());
        let t = transport.clone();
        let thread = thread::Builder::new()
            .name(format!("node-{}", cfg.node_id))
            .spawn(move || run(node, rx, t))
            .context("spawning node thread")?;

        let net = tx.clone();
        transport.serve(peer_listener, move |from, wire| {
            let _ = net.send(Input::Network(from, wire));
        });
        let api = ApiServer::serve(client_listener, handle.clone())?;
        let monitor = Monitor::start(me.monitor, handle.clone(), cfg.operator_token.clone())?;
        Ok(Runtime {
            id: cfg.node_id,
            handle,
            thread: Some(thread),
            transport,
            peer_addr,
            client_addr,
            monitor_addr: monitor.addr(),
            monitor: Some(monitor),
            api,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn handle(&self) -> &Handle {
        &self.handle
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_addr
    }

    pub fn client_addr(&self) -> SocketAddr {
        self.client_addr
    }

    pub fn monitor_addr(&self) -> SocketAddr {
        self.monitor_addr
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    /// Blocks until the node thread exits (it runs until [`Runtime::stop`]).
    pub fn wait(mut self) -> Option<Disk> {
        self.thread.take().and_then(|t| t.join().ok())
    }

    /// Persists state and stops the node. Returns its storage.
    pub fn stop(mut self) -> Option<Disk> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Option<Disk> {
        let thread = self.thread.take()?;
        let _ = self.handle.tx.send(Input::Stop);
        let disk = thread.join().ok();
        if let Some(m) = self.monitor.take() {
            m.stop();
        }
        self.api.close();
        self.transport.close(self.peer_addr);
        disk
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run(mut node: Node, rx: Receiver<Input>, transport: Arc<Transport>) -> Disk {
    let mut replies: BTreeMap<u64, Reply> = BTreeMap::new();
    let mut next_call: u64 = 1;
    loop {
        let now = now_ms();
        let wait = node.next_deadline().map_or(IDLE_WAKE, |d| Duration::from_millis(d.saturating_sub(now))).min(IDLE_WAKE);
        let mut inputs = Vec::new();
        match rx.recv_timeout(wait) {
            Ok(i) => inputs.push(i),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        while inputs.len() < BATCH {
            match rx.try_recv() {
                Ok(i) => inputs.push(i),
                Err(_) => break,
            }
        }
        let now = now_ms();
        for input in inputs {
            match input {
                Input::Network(from, wire) => node.handle_network(from, wire, now),
                Input::Call(call, reply) => {
                    let id = next_call;
                    next_call += 1;
                    replies.insert(id, reply);
                    node.handle_call(id, call, now);
                }
                Input::Inspect(f) => f(&mut node, now),
                Input::Stop => return node.shutdown(),
            }
        }
        if node.next_deadline().is_some_and(|d| d <= now) {
            node.tick(now);
        }
        for (to, wire) in node.drain() {
            transport.send(to, wire);
        }
        for (id, result) in node.take_completed() {
            if let Some(reply) = replies.remove(&id) {
                reply(result);
            }
        }
    }
    node.shutdown()
}
