use super::*;
use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

fn payload(i: u64) -> Vec<u8> {
    format!(r#"{{"op":{i}}}"#).into_bytes()
}

fn chain(n: u64) -> ChainStore {
    let mut s = ChainStore::memory();
    for i in 1..=n {
        s.append_ordered(i, i * 2, payload(i), NodeId((i % 4) as u32)).unwrap();
    }
    s
}

/// Independent block hash: SHA-256 over the documented byte layout.
fn oracle_hash(height: u64, seq: u64, prev: &[u8], payload: &[u8], origin: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(height.to_be_bytes());
    h.update(seq.to_be_bytes());
    h.update(prev);
    h.update((payload.len() as u32).to_be_bytes());
    h.update(payload);
    h.update(origin.to_be_bytes());
    h.finalize().into()
}

#[test]
fn first_block_links_to_genesis() {
    let mut s = ChainStore::memory();
    let b = s.append_ordered(1, 1, payload(1), NodeId(0)).unwrap();
    assert_eq!(b.prev, Digest::ZERO);
    assert_eq!(b.hash.0, oracle_hash(1, 1, &[0; 32], &payload(1), 0));
    assert_eq!(s.head(), b.reference());
}

#[test]
fn same_operations_give_same_hashes() {
    let a = chain(12);
    let b = chain(12);
    assert_eq!(a.head(), b.head());
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
}

#[test]
fn append_past_the_head_is_a_gap() {
    let mut s = chain(3);
    match s.append_ordered(5, 100, payload(5), NodeId(0)) {
        Err(ChainError::SequenceGap { expected: 4, got: 5 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        s.append_ordered(4, 6, payload(4), NodeId(0)),
        Err(ChainError::SequenceRegression { head: 6, got: 6 })
    ));
}

#[test]
fn valid_chain_verifies() {
    let s = chain(10);
    assert_eq!(s.verify(), Verification::Ok { head: s.head() });
    assert_eq!(s.verify_chain(s.head()), Verification::Ok { head: s.head() });
}

#[test]
fn flipped_payload_byte_on_disk_breaks_at_that_block() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.log");
    let head = {
        let (mut s, _) = ChainStore::open(&path).unwrap();
        for i in 1..=10 {
            s.append_ordered(i, i, payload(i), NodeId(1)).unwrap();
        }
        s.head()
    };
    let mut bytes = std::fs::read(&path).unwrap();
    // Locate block 6's payload by walking records.
    let mut at = encode_header().len();
    for _ in 1..6 {
        at += 4 + u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let payload_at = at + 4 + 56;
    bytes[payload_at] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();

    // Oracle: the mutated block no longer hashes to its stored value.
    let stored = &bytes[at + 4..];
    let plen = u32::from_be_bytes(stored[52..56].try_into().unwrap()) as usize;
    let recomputed = oracle_hash(6, 6, &stored[16..48], &stored[56..56 + plen], 1);
    assert_ne!(&recomputed[..], &stored[56 + plen..56 + plen + 32]);

    let (s, report) = ChainStore::open(&path).unwrap();
    assert_eq!(report.blocks, 10);
    assert_eq!(s.verify_chain(head), Verification::Broken { height: 6 });
}

#[test]
fn missing_block_is_reported_by_hash() {
    let mut s = chain(10);
    let h4 = s.get(4).unwrap().hash;
    s.remove(4);
    assert_eq!(s.verify(), Verification::Missing { hashes: vec![h4] });
}

#[test]
fn verify_against_a_head_we_do_not_have() {
    let full = chain(8);
    let mut part = chain(8);
    part.truncate(5).unwrap();
    assert_eq!(
        part.verify_chain(full.head()),
        Verification::Missing { hashes: vec![full.head().hash] }
    );
}

#[test]
fn serves_ranges_and_hashes() {
    let s = chain(10);
    let Some(PeerMessage::BlockSend { blocks }) = s.serve_peer(&PeerMessage::BlockRequest { from: 4, count: 4 }) else {
        panic!()
    };
    assert_eq!(blocks.iter().map(|b| b.height).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
    let unknown = PeerMessage::BlockByHash { hash: Digest::of(b"nope") };
    assert_eq!(s.serve_peer(&unknown), Some(PeerMessage::BlockSend { blocks: vec![] }));
    let h = s.get(3).unwrap().hash;
    let Some(PeerMessage::BlockSend { blocks }) = s.serve_peer(&PeerMessage::BlockByHash { hash: h }) else {
        panic!()
    };
    assert_eq!(blocks[0].height, 3);
    assert_eq!(s.serve_peer(&PeerMessage::BlockSend { blocks: vec![] }), None);
}

#[test]
fn catch_up_rejects_block_with_wrong_prev() {
    let source = chain(7);
    let mut local = chain(7);
    local.truncate(3).unwrap();
    let mut cu = CatchUp::new(local.head(), source.head());
    assert_eq!(cu.wanted(100), vec![(4, 4)]);

    let mut forged = source.get(5).unwrap().clone();
    forged.prev = Digest::of(b"elsewhere");
    forged.hash = Block::compute_hash(forged.height, forged.seq, &forged.prev, &forged.payload, forged.origin);
    let honest: Vec<Block> = [4, 6, 7].iter().map(|h| source.get(*h).unwrap().clone()).collect();

    assert!(cu.offer(NodeId(1), honest).is_empty());
    assert_eq!(cu.offer(NodeId(2), vec![forged]), vec![NodeId(2)]);
    assert_eq!(cu.status(), CatchUpStatus::InProgress);
    assert_eq!(cu.wanted(100), vec![(5, 1)]);

    cu.offer(NodeId(3), vec![source.get(5).unwrap().clone()]);
    assert_eq!(cu.status(), CatchUpStatus::Complete);
    for b in cu.into_blocks() {
        local.append_verified(b).unwrap();
    }
    assert_eq!(local.head(), source.head());
    assert!(local.verify().is_ok());
}

#[test]
fn catch_up_ignores_unrequested_heights() {
    let source = chain(6);
    let mut cu = CatchUp::new(source.get(4).unwrap().reference(), source.head());
    assert!(cu.offer(NodeId(1), source.range(1, 4)).is_empty());
    assert_eq!(cu.verified_count(), 0);
    cu.offer(NodeId(1), source.range(5, 2));
    assert_eq!(cu.status(), CatchUpStatus::Complete);
}

#[test]
fn catch_up_detects_foreign_base() {
    let source = chain(6);
    let mut other = ChainStore::memory();
    for i in 1..=3 {
        other.append_ordered(i, i, b"x".to_vec(), NodeId(0)).unwrap();
    }
    let mut cu = CatchUp::new(other.head(), source.head());
    cu.offer(NodeId(1), source.range(4, 3));
    assert_eq!(cu.status(), CatchUpStatus::BaseMismatch);
}

#[test]
fn log_round_trip_and_partial_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.log");
    let expected = {
        let (mut s, _) = ChainStore::open(&path).unwrap();
        for i in 1..=5 {
            s.append_ordered(i, i + 10, payload(i), NodeId(2)).unwrap();
        }
        s.iter().cloned().collect::<Vec<_>>()
    };
    // Simulate a crash halfway through the sixth append.
    let extra = encode_record(&Block::new(6, 20, expected[4].hash, payload(6), NodeId(2)));
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    std::io::Write::write_all(&mut f, &extra[..extra.len() / 2]).unwrap();
    drop(f);

    let (mut s, report) = ChainStore::open(&path).unwrap();
    assert_eq!(report.truncated_bytes, (extra.len() / 2) as u64);
    assert_eq!(s.iter().cloned().collect::<Vec<_>>(), expected);
    assert!(s.verify().is_ok());
    assert_eq!(s.by_seq(13).unwrap().height, 3);
    s.append_ordered(6, 20, payload(6), NodeId(2)).unwrap();
    drop(s);
    let (s, _) = ChainStore::open(&path).unwrap();
    assert_eq!(s.height(), 6);
    assert!(s.verify().is_ok());
}

#[test]
fn header_pins_the_hash_function() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.log");
    let mut bytes = encode_header();
    let n = bytes.len();
    bytes[n - 1] = b'5';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(ChainStore::open(&path), Err(ChainError::Log(LogError::HashFunction { .. }))));
}

#[test]
fn truncate_and_wipe_persist() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.log");
    let (mut s, _) = ChainStore::open(&path).unwrap();
    for i in 1..=6 {
        s.append_ordered(i, i, payload(i), NodeId(0)).unwrap();
    }
    s.truncate(2).unwrap();
    s.append_ordered(3, 9, payload(9), NodeId(0)).unwrap();
    let (again, _) = ChainStore::open(&path).unwrap();
    assert_eq!(again.head(), s.head());
    s.wipe().unwrap();
    let (again, _) = ChainStore::open(&path).unwrap();
    assert!(again.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_bit_flip_is_detected(n in 1u64..12, pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let s = chain(n);
        let head = s.head();
        let mut bytes = encode_header();
        let body_start = bytes.len();
        for b in s.iter() {
            bytes.extend_from_slice(&encode_record(b));
        }
        let at = body_start + pick.index(bytes.len() - body_start);
        bytes[at] ^= 1 << bit;
        match decode_log(&bytes) {
            Ok(loaded) => {
                let mut t = ChainStore::memory();
                for (i, b) in loaded.blocks.into_iter().enumerate() {
                    t.index(i as u64 + 1, b);
                }
                t.damaged = loaded.damaged.into_iter().collect();
                prop_assert!(!t.verify_chain(head).is_ok());
            }
            Err(_) => {}
        }
    }

    #[test]
    fn appended_chains_always_verify(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..20)) {
        let mut s = ChainStore::memory();
        for (i, p) in payloads.into_iter().enumerate() {
            s.append_ordered(i as u64 + 1, i as u64 + 1, p, NodeId(0)).unwrap();
        }
        prop_assert!(s.verify().is_ok());
    }
}
