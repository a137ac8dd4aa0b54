use std::collections::BTreeMap;

use crate::auth::KeyRing;
use crate::model::NodeId;

use super::config::ViewConfig;
use super::messages::{ConsensusMessage, Mode, Request, RequestBody};

#[derive(Clone, Debug)]
pub struct ClientSettings {
    pub retransmit_ms: u64,
    pub timeout_ms: u64,
}

impl Default for ClientSettings {
    fn default() -> Self {
        ClientSettings { retransmit_ms: 1000, timeout_ms: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientEvent {
    /// 2f+1 members returned the same result.
    Done { id: u64, result: Vec<u8> },
    TimedOut { id: u64 },
}

#[derive(Clone, Debug)]
struct Outstanding {
    request: Request,
    deadline: u64,
    next_retry: u64,
    replies: BTreeMap<NodeId, Vec<u8>>,
}

/// Submits requests and waits for a reply quorum.
pub struct Client {
    id: NodeId,
    keys: KeyRing,
    settings: ClientSettings,
    next_id: u64,
    outstanding: BTreeMap<u64, Outstanding>,
    out: Vec<(NodeId, ConsensusMessage)>,
}

impl Client {
    /// `first_id` must exceed every id this client used before a restart;
    /// replicas drop ids they already executed.
    pub fn new(id: NodeId, keys: KeyRing, settings: ClientSettings, first_id: u64) -> Self {
        Client { id, keys, settings, next_id: first_id, outstanding: BTreeMap::new(), out: Vec::new() }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Id the next `submit` will use.
    pub fn peek_next_id(&self) -> u64 {
        self.next_id
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn submit(&mut self, mode: Mode, body: RequestBody, config: &ViewConfig, now: u64) -> u64 {
        self.submit_with_timeout(mode, body, config, now, self.settings.timeout_ms)
    }

    pub fn submit_with_timeout(
        &mut self,
        mode: Mode,
        body: RequestBody,
        config: &ViewConfig,
        now: u64,
        timeout_ms: u64,
    ) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let mut request = Request::new(self.id, id, mode, body);
        request.sign(&self.keys, &config.members);
        self.send_all(&request, config);
        self.outstanding.insert(
            id,
            Outstanding {
                request,
                deadline: now + timeout_ms,
                next_retry: now + self.settings.retransmit_ms,
                replies: BTreeMap::new(),
            },
        );
        id
    }

    /// Includes this node itself: the local replica sees its own client's
    /// requests through the outbox like any other member.
    fn send_all(&mut self, request: &Request, config: &ViewConfig) {
        for m in &config.members {
            self.out.push((*m, ConsensusMessage::Request(request.clone())));
        }
    }

    pub fn on_reply(&mut self, from: NodeId, id: u64, result: Vec<u8>, config: &ViewConfig) -> Option<ClientEvent> {
        if !config.is_member(from) {
            return None;
        }
        let o = self.outstanding.get_mut(&id)?;
        o.replies.insert(from, result.clone());
        let matching = o.replies.values().filter(|r| **r == result).count();
        if matching >= config.quorum() {
            self.outstanding.remove(&id);
            return Some(ClientEvent::Done { id, result });
        }
        None
    }

    pub fn tick(&mut self, now: u64, config: &ViewConfig) -> Vec<ClientEvent> {
        let mut events = Vec::new();
        let mut resend = Vec::new();
        self.outstanding.retain(|id, o| {
            if now >= o.deadline {
                events.push(ClientEvent::TimedOut { id: *id });
                return false;
            }
            if now >= o.next_retry {
                o.next_retry = now + self.settings.retransmit_ms;
                resend.push(o.request.clone());
            }
            true
        });
        for mut r in resend {
            // Membership may have changed since the first send.
            r.sign(&self.keys, &config.members);
            self.send_all(&r, config);
        }
        events
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.outstanding.values().map(|o| o.deadline.min(o.next_retry)).min()
    }

    pub fn drain(&mut self) -> Vec<(NodeId, ConsensusMessage)> {
        std::mem::take(&mut self.out)
    }
}
