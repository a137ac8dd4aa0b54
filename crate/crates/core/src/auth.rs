//! Pairwise message authentication with pre-shared keys.
//!
//! Every ordered pair of nodes shares one symmetric key. A message sent from
//! `a` to `b` carries an HMAC-SHA256 tag under `key(a, b)`; a broadcast is a
//! set of point-to-point sends, which amounts to an authenticator vector.

use std::collections::BTreeMap;

use hmac::{KeyInit, Mac};
use sha2::Sha256;

use crate::digest::Digest;
use crate::model::NodeId;

type HmacSha256 = hmac::Hmac<Sha256>;

pub type Key = [u8; 32];

/// Derives the key shared by `a` and `b` from a cluster secret. Symmetric in
/// its node arguments.
pub fn derive_pair_key(cluster_secret: &[u8], a: NodeId, b: NodeId) -> Key {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut mac = HmacSha256::new_from_slice(cluster_secret).expect("hmac accepts any key length");
    mac.update(b"pair-key");
    mac.update(&lo.0.to_be_bytes());
    mac.update(&hi.0.to_be_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&mac.finalize().into_bytes());
    key
}

pub fn mac(key: &Key, message: &[u8]) -> Digest {
    let mut m = HmacSha256::new_from_slice(key).expect("32-byte key");
    m.update(message);
    let mut out = [0u8; 32];
    out.copy_from_slice(&m.finalize().into_bytes());
    Digest(out)
}

/// Keys this node shares with each peer.
#[derive(Clone, Debug)]
pub struct KeyRing {
    own: NodeId,
    keys: BTreeMap<NodeId, Key>,
    secret: Option<Vec<u8>>,
}

impl KeyRing {
    pub fn new(own: NodeId, keys: BTreeMap<NodeId, Key>) -> Self {
        KeyRing { own, keys, secret: None }
    }

    /// Key ring that derives the key for any peer from a shared cluster secret,
    /// so nodes that join later are covered without reconfiguring keys.
    pub fn from_secret(own: NodeId, cluster_secret: &[u8]) -> Self {
        KeyRing { own, keys: BTreeMap::new(), secret: Some(cluster_secret.to_vec()) }
    }

    pub fn own(&self) -> NodeId {
        self.own
    }

    fn key_for(&self, peer: NodeId) -> Option<Key> {
        if let Some(k) = self.keys.get(&peer) {
            return Some(*k);
        }
        self.secret.as_ref().map(|s| derive_pair_key(s, self.own, peer))
    }

    pub fn tag(&self, peer: NodeId, message: &[u8]) -> Option<Digest> {
        self.key_for(peer).map(|k| mac(&k, message))
    }

    pub fn verify(&self, peer: NodeId, message: &[u8], tag: &Digest) -> bool {
        let Some(key) = self.key_for(peer) else { return false };
        let mut m = HmacSha256::new_from_slice(&key).expect("32-byte key");
        m.update(message);
        m.verify_slice(&tag.0).is_ok()
    }
}
