//! Client API: framed JSON over TCP on the node's client port.
//!
//! Request: `{"id": 7, "call": {"call": "write", "opType": "LaunchCase", ...}}`.
//! Response: `{"id": 7, "ok": <result>}` or `{"id": 7, "error": <gateway error>}`.
//! Requests on one connection may be pipelined; responses come back in
//! completion order and are matched by `id`.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use bftflow_core::gateway::{Call, CallResult, GatewayError, GatewayErrorKind};

use crate::frame::{read_frame, write_frame};
use crate::runtime::Handle;

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiRequest {
    pub id: u64,
    pub call: Call,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<GatewayError>,
}

impl ApiResponse {
    fn new(id: u64, r: CallResult) -> Self {
        match r {
            Ok(v) => ApiResponse { id, ok: Some(v), error: None },
            Err(e) => ApiResponse { id, ok: None, error: Some(e) },
        }
    }

    pub fn into_result(self) -> CallResult {
        match (self.ok, self.error) {
            (_, Some(e)) => Err(e),
            (v, None) => Ok(v.unwrap_or(Value::Null)),
        }
    }
}

pub struct ApiServer {
    addr: SocketAddr,
    stopped: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl ApiServer {
    pub fn serve(listener: TcpListener, node: Handle) -> io::Result<ApiServer> {
        let addr = listener.local_addr()?;
        let stopped = Arc::new(AtomicBool::new(false));
        let flag = stopped.clone();
        let accept = thread::Builder::new()
            .name("api-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if flag.load(Ordering::Relaxed) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let node = node.clone();
                    let _ = thread::Builder::new().name("api-conn".into()).spawn(move || connection(stream, node));
                }
            })
            .expect("spawn api thread");
        Ok(ApiServer { addr, stopped, accept: Some(accept) })
    }

    /// Releases the port. Open connections end when their node stops.
    pub fn close(&mut self) {
        self.stopped.store(true, Ordering::Relaxed);
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

fn connection(stream: TcpStream, node: Handle) {
    let _ = stream.set_nodelay(true);
    let Ok(wstream) = stream.try_clone() else { return };
    let (tx, rx) = mpsc::channel::<ApiResponse>();
    let writer = thread::spawn(move || {
        let mut w = BufWriter::new(wstream);
        while let Ok(first) = rx.recv() {
            let mut ok = write_frame(&mut w, &serde_json::to_vec(&first).expect("response serializes")).is_ok();
            while let Ok(more) = rx.try_recv() {
                ok = ok && write_frame(&mut w, &serde_json::to_vec(&more).expect("response serializes")).is_ok();
            }
            if !ok || w.flush().is_err() {
                break;
            }
        }
    });
    let mut r = BufReader::new(stream);
    while let Ok(Some(bytes)) = read_frame(&mut r) {
        let req: ApiRequest = match serde_json::from_slice(&bytes) {
            Ok(req) => req,
            Err(e) => {
                let err = GatewayError { kind: GatewayErrorKind::InvalidCall, message: e.to_string(), detail: None };
                let _ = tx.send(ApiResponse::new(0, Err(err)));
                continue;
            }
        };
        let tx = tx.clone();
        let id = req.id;
        if !node.submit(req.call, move |r| {
            let _ = tx.send(ApiResponse::new(id, r));
        }) {
            break;
        }
    }
    drop(tx);
    let _ = writer.join();
}

/// Blocking client for the API.
pub struct ApiClient {
    r: BufReader<TcpStream>,
    w: BufWriter<TcpStream>,
    next: u64,
}

impl ApiClient {
    pub fn connect(addr: SocketAddr) -> io::Result<ApiClient> {
        let s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(Duration::from_secs(60)))?;
        Ok(ApiClient { r: BufReader::new(s.try_clone()?), w: BufWriter::new(s), next: 1 })
    }

    /// Sends without waiting; returns the request id.
    pub fn send(&mut self, call: &Call) -> io::Result<u64> {
        let id = self.next;
        self.next += 1;
        let body = serde_json::json!({ "id": id, "call": call });
        write_frame(&mut self.w, &serde_json::to_vec(&body)?)?;
        self.w.flush()?;
        Ok(id)
    }

    pub fn recv(&mut self) -> io::Result<(u64, CallResult)> {
        let bytes = read_frame(&mut self.r)?.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        let resp: ApiResponse = serde_json::from_slice(&bytes)?;
        Ok((resp.id, resp.into_result()))
    }

    pub fn call(&mut self, call: &Call) -> io::Result<CallResult> {
        let id = self.send(call)?;
        loop {
            let (got, r) = self.recv()?;
            if got == id {
                return Ok(r);
            }
        }
    }
}
