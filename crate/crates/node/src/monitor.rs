//! Read-only HTTP/JSON view of a running node, plus `POST /recover`.
//!
//! | route | answer |
//! |---|---|
//! | `GET /chain/head` | head block reference and verification |
//! | `GET /chain/blocks?from=H&count=K` | up to K blocks from height H (max 512) |
//! | `GET /block/{hash}` | one block, 404 if unknown |
//! | `GET /view` | view number, members, f, leader |
//! | `GET /engine/digest` | engine state digest and last applied block |
//! | `GET /status` | node status summary |
//! | `POST /recover` | 202 with a valid `X-Operator-Token`, else 403 |

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use anyhow::Context;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use bftflow_core::blockstore::Block;
use bftflow_core::Digest;

use crate::runtime::Handle;

const MAX_BLOCKS: u32 = 512;

pub struct Monitor {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl Monitor {
    pub fn start(addr: SocketAddr, node: Handle, token: Option<String>) -> anyhow::Result<Monitor> {
        let server = Arc::new(Server::http(addr).map_err(|e| anyhow::anyhow!("{e}")).context("binding monitor")?);
        let addr = server.server_addr().to_ip().context("monitor is not on an IP socket")?;
        let workers = (0..2)
            .map(|_| {
                let (server, node, token) = (server.clone(), node.clone(), token.clone());
                thread::spawn(move || {
                    for req in server.incoming_requests() {
                        let (status, body) = route(&req, &node, token.as_deref());
                        let resp = Response::from_string(body.to_string())
                            .with_status_code(status)
                            .with_header(Header::from_bytes("Content-Type", "application/json").expect("header"));
                        let _ = req.respond(resp);
                    }
                })
            })
            .collect();
        Ok(Monitor { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(self) {
        self.server.unblock();
        self.server.unblock();
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn not_found(what: &str) -> (u16, Value) {
    (404, json!({ "error": format!("{what} not found") }))
}

fn block_json(b: &Block) -> Value {
    let op: Value = serde_json::from_slice(&b.payload).unwrap_or(Value::Null);
    json!({
        "height": b.height,
        "seq": b.seq,
        "prevHash": b.prev,
        "hash": b.hash,
        "originNode": b.origin,
        "operation": op,
        "payloadHex": hex::encode(&b.payload),
    })
}

fn query_param(url: &str, key: &str) -> Option<String> {
    let q = url.split_once('?')?.1;
    q.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key).then(|| v.to_string())
    })
}

fn route(req: &Request, node: &Handle, token: Option<&str>) -> (u16, Value) {
    let url = req.url().to_string();
    let path = url.split('?').next().unwrap_or("");
    let gone = || (503, json!({ "error": "node stopped" }));
    match (req.method(), path) {
        (Method::Get, "/chain/head") => node
            .inspect(|n, _| {
                let chain = n.app().chain();
                (200, json!({ "head": chain.head(), "verification": chain.verify() }))
            })
            .unwrap_or_else(gone),
        (Method::Get, "/chain/blocks") => {
            let from = query_param(&url, "from").and_then(|v| v.parse().ok()).unwrap_or(1u64);
            let count = query_param(&url, "count").and_then(|v| v.parse().ok()).unwrap_or(20u32).min(MAX_BLOCKS);
            node.inspect(move |n, _| {
                let blocks: Vec<Value> = n.app().chain().range(from, count).iter().map(block_json).collect();
                (200, json!({ "from": from, "blocks": blocks }))
            })
            .unwrap_or_else(gone)
        }
        (Method::Get, p) if p.starts_with("/block/") => {
            let Ok(hash) = p["/block/".len()..].parse::<Digest>() else {
                return (400, json!({ "error": "malformed block hash" }));
            };
            node.inspect(move |n, _| match n.app().chain().by_hash(&hash) {
                Some(b) => (200, block_json(b)),
                None => not_found("block"),
            })
            .unwrap_or_else(gone)
        }
        (Method::Get, "/view") => node
            .inspect(|n, _| {
                let c = n.config();
                (
                    200,
                    json!({
                        "viewNumber": c.view,
                        "members": c.members,
                        "f": c.f,
                        "leader": c.leader(),
                        "epoch": c.epoch,
                        "phase": n.replica().phase(),
                    }),
                )
            })
            .unwrap_or_else(gone),
        (Method::Get, "/engine/digest") => node
            .inspect(|n, _| {
                let e = n.app().engine();
                (
                    200,
                    json!({
                        "digest": e.digest(),
                        "lastBlockHash": e.last_block_hash(),
                        "appliedCount": e.applied_count(),
                    }),
                )
            })
            .unwrap_or_else(gone),
        (Method::Get, "/status") => node.inspect(|n, _| (200, n.status())).unwrap_or_else(gone),
        (Method::Post, "/recover") => {
            let given = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("X-Operator-Token"))
                .map(|h| h.value.as_str().to_string());
            match (token, given) {
                (Some(t), Some(g)) if t == g => node
                    .inspect(|n, now| {
                        n.recover(now);
                        (202, json!({ "recovering": true }))
                    })
                    .unwrap_or_else(gone),
                _ => (403, json!({ "error": "operator token required" })),
            }
        }
        _ => not_found("route"),
    }
}
