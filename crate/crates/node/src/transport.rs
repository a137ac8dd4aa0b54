//! Peer links over TCP. Every message is a sealed [`Envelope`] in one frame.
//!
//! Outgoing traffic to each peer goes through its own writer thread, which
//! connects lazily and keeps a bounded backlog while the peer is unreachable;
//! the protocols above retransmit whatever is lost. Incoming envelopes are
//! authenticated before they reach the node.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bftflow_core::auth::KeyRing;
use bftflow_core::gateway::{Envelope, Wire};
use bftflow_core::NodeId;

use crate::frame::{read_frame, write_frame};

const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);
const RECONNECT_PAUSE: Duration = Duration::from_millis(200);
const MAX_BACKLOG: usize = 8192;

#[derive(Debug, Default)]
pub struct LinkStats {
    pub sent: AtomicU64,
    pub dropped: AtomicU64,
    pub received: AtomicU64,
    pub rejected: AtomicU64,
}

pub struct Transport {
    keys: KeyRing,
    book: BTreeMap<NodeId, SocketAddr>,
    writers: Mutex<BTreeMap<NodeId, Sender<Vec<u8>>>>,
    stopped: Arc<AtomicBool>,
    accept: Mutex<Option<JoinHandle<()>>>,
    /// Accepted streams, shut down on close so peers notice and reconnect.
    inbound: Arc<Mutex<Vec<TcpStream>>>,
    pub stats: Arc<LinkStats>,
}

impl Transport {
    pub fn new(keys: KeyRing, book: BTreeMap<NodeId, SocketAddr>) -> Transport {
        Transport {
            keys,
            book,
            writers: Mutex::new(BTreeMap::new()),
            stopped: Arc::new(AtomicBool::new(false)),
            accept: Mutex::new(None),
            inbound: Arc::new(Mutex::new(Vec::new())),
            stats: Arc::new(LinkStats::default()),
        }
    }

    /// Accepts peer connections on `listener`; authenticated messages go to `deliver`.
    pub fn serve(&self, listener: TcpListener, deliver: impl Fn(NodeId, Wire) + Send + Sync + 'static) {
        let keys = self.keys.clone();
        let stats = self.stats.clone();
        let stopped = self.stopped.clone();
        let deliver = Arc::new(deliver);
        let inbound = self.inbound.clone();
        let t = thread::Builder::new()
            .name("peer-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stopped.load(Ordering::Relaxed) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    if let Ok(s) = stream.try_clone() {
                        inbound.lock().expect("inbound lock").push(s);
                    }
                    let (keys, stats, deliver) = (keys.clone(), stats.clone(), deliver.clone());
                    let _ = thread::Builder::new().name("peer-read".into()).spawn(move || {
                        let _ = stream.set_nodelay(true);
                        let mut r = BufReader::new(stream);
                        while let Ok(Some(bytes)) = read_frame(&mut r) {
                            match Envelope::open(&keys, &bytes) {
                                Ok(env) => {
                                    stats.received.fetch_add(1, Ordering::Relaxed);
                                    deliver(env.from, env.body);
                                }
                                Err(_) => {
                                    stats.rejected.fetch_add(1, Ordering::Relaxed);
                                }
                            }
                        }
                    });
                }
            })
            .expect("spawn accept thread");
        *self.accept.lock().expect("accept lock") = Some(t);
    }

    pub fn send(&self, to: NodeId, body: Wire) {
        let Some(addr) = self.book.get(&to).copied() else {
            self.stats.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let Some(env) = Envelope::seal(&self.keys, to, body) else { return };
        let bytes = env.to_bytes();
        let mut writers = self.writers.lock().expect("writers lock");
        let tx = writers.entry(to).or_insert_with(|| {
            let (tx, rx) = mpsc::channel();
            let stats = self.stats.clone();
            thread::Builder::new()
                .name(format!("peer-write-{to}"))
                .spawn(move || writer(addr, rx, stats))
                .expect("spawn writer thread");
            tx
        });
        let _ = tx.send(bytes);
    }

    /// Stops accepting and drops inbound links; the port is free on return.
    /// Writer threads end once their channels close.
    pub fn close(&self, listen: SocketAddr) {
        self.stopped.store(true, Ordering::Relaxed);
        self.writers.lock().expect("writers lock").clear();
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect_timeout(&listen, CONNECT_TIMEOUT);
        if let Some(t) = self.accept.lock().expect("accept lock").take() {
            let _ = t.join();
        }
        for s in self.inbound.lock().expect("inbound lock").drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Holds messages while the peer is unreachable, oldest dropped first.
fn writer(addr: SocketAddr, rx: Receiver<Vec<u8>>, stats: Arc<LinkStats>) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    let mut last_attempt: Option<Instant> = None;
    let mut backlog: VecDeque<Vec<u8>> = VecDeque::new();
    loop {
        let next = if backlog.is_empty() {
            rx.recv().map_err(|_| RecvTimeoutError::Disconnected)
        } else {
            rx.recv_timeout(RECONNECT_PAUSE)
        };
        match next {
            Ok(b) => backlog.push_back(b),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
        while let Ok(b) = rx.try_recv() {
            backlog.push_back(b);
        }
        while backlog.len() > MAX_BACKLOG {
            backlog.pop_front();
            stats.dropped.fetch_add(1, Ordering::Relaxed);
        }
        if conn.is_none() && last_attempt.is_none_or(|t| t.elapsed() >= RECONNECT_PAUSE) {
            last_attempt = Some(Instant::now());
            if let Ok(s) = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                let _ = s.set_nodelay(true);
                conn = Some(BufWriter::new(s));
            }
        }
        let Some(w) = conn.as_mut() else { continue };
        let n = backlog.len() as u64;
        let ok = backlog.iter().all(|b| write_frame(w, b).is_ok()) && w.flush().is_ok();
        backlog.clear();
        if ok {
            stats.sent.fetch_add(n, Ordering::Relaxed);
        } else {
            // Some of these may have arrived; the protocols tolerate both.
            stats.dropped.fetch_add(n, Ordering::Relaxed);
            conn = None;
        }
    }
}
