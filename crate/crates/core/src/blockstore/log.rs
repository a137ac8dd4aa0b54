//! Chain log file format.
//!
//! ```text
//! header  := "BFWCHAIN" version:u16 idlen:u8 hash-id[idlen]
//! record  := len:u32 body[len]
//! body    := height:u64 seq:u64 prev[32] origin:u32 plen:u32 payload[plen] hash[32]
//! ```
//!
//! All integers are big-endian and `len = 88 + plen`. Records are positional:
//! the i-th record is height i. `len` and `plen` are redundant on purpose; when
//! they disagree the framing that lets the rest of the file parse wins and the
//! record is marked damaged, so a flipped length byte is reported at its own
//! height instead of corrupting everything after it.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::digest::{Digest, HASH_FUNCTION_ID};
use crate::model::NodeId;

use super::Block;

pub const HEADER_MAGIC: &[u8; 8] = b"BFWCHAIN";
pub const LOG_VERSION: u16 = 1;
const FIXED: usize = 88;
const PLEN_AT: usize = 52;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("not a chain log (bad magic)")]
    BadMagic,
    #[error("unsupported chain log version {0}")]
    Version(u16),
    #[error("chain log uses hash function {found:?}, this node uses {expected:?}")]
    HashFunction { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_header() -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + HASH_FUNCTION_ID.len());
    out.extend_from_slice(HEADER_MAGIC);
    out.extend_from_slice(&LOG_VERSION.to_be_bytes());
    out.push(HASH_FUNCTION_ID.len() as u8);
    out.extend_from_slice(HASH_FUNCTION_ID.as_bytes());
    out
}

pub fn encode_record(b: &Block) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + FIXED + b.payload.len());
    out.extend_from_slice(&((FIXED + b.payload.len()) as u32).to_be_bytes());
    out.extend_from_slice(&b.height.to_be_bytes());
    out.extend_from_slice(&b.seq.to_be_bytes());
    out.extend_from_slice(&b.prev.0);
    out.extend_from_slice(&b.origin.0.to_be_bytes());
    out.extend_from_slice(&(b.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&b.payload);
    out.extend_from_slice(&b.hash.0);
    out
}

#[derive(Debug, Default)]
pub struct LoadedLog {
    pub blocks: Vec<Block>,
    /// Heights whose framing was inconsistent.
    pub damaged: Vec<u64>,
    /// Length of the well-formed prefix.
    pub valid_len: u64,
    pub truncated_bytes: u64,
}

fn be32(b: &[u8], at: usize) -> Option<usize> {
    b.get(at..at + 4).map(|s| u32::from_be_bytes(s.try_into().unwrap()) as usize)
}

/// Record end offsets that `len` and `plen` propose for the record at `at`.
fn candidates(buf: &[u8], at: usize) -> (Option<usize>, Option<usize>) {
    let by_len = be32(buf, at).map(|l| at + 4 + l);
    let by_plen = be32(buf, at + 4 + PLEN_AT).map(|p| at + 4 + FIXED + p);
    (by_len, by_plen)
}

/// The record at `at` is framed consistently and fits.
fn clean_at(buf: &[u8], at: usize) -> Option<usize> {
    match candidates(buf, at) {
        (Some(a), Some(b)) if a == b && a <= buf.len() && a >= at + 4 + FIXED => Some(a),
        _ => None,
    }
}

/// Every record from `at` to the end of the buffer is clean.
fn clean_tail(buf: &[u8], mut at: usize) -> bool {
    while at < buf.len() {
        match clean_at(buf, at) {
            Some(next) => at = next,
            None => return false,
        }
    }
    at == buf.len()
}

fn parse_body(body: &[u8], framed_plen: usize) -> Block {
    let u64_at = |i: usize| u64::from_be_bytes(body[i..i + 8].try_into().unwrap());
    let mut prev = [0u8; 32];
    prev.copy_from_slice(&body[16..48]);
    let origin = u32::from_be_bytes(body[48..52].try_into().unwrap());
    let payload = body[56..56 + framed_plen].to_vec();
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&body[56 + framed_plen..56 + framed_plen + 32]);
    Block {
        height: u64_at(0),
        seq: u64_at(8),
        prev: Digest(prev),
        payload,
        origin: NodeId(origin),
        hash: Digest(hash),
    }
}

pub fn decode_log(buf: &[u8]) -> Result<LoadedLog, LogError> {
    if buf.len() < 11 || &buf[..8] != HEADER_MAGIC {
        return Err(LogError::BadMagic);
    }
    let version = u16::from_be_bytes([buf[8], buf[9]]);
    if version != LOG_VERSION {
        return Err(LogError::Version(version));
    }
    let idlen = buf[10] as usize;
    let id = buf.get(11..11 + idlen).ok_or(LogError::BadMagic)?;
    if id != HASH_FUNCTION_ID.as_bytes() {
        return Err(LogError::HashFunction {
            found: String::from_utf8_lossy(id).into_owned(),
            expected: HASH_FUNCTION_ID.to_string(),
        });
    }
    let mut out = LoadedLog::default();
    let mut at = 11 + idlen;
    while at < buf.len() {
        let end = match clean_at(buf, at) {
            Some(end) => end,
            None => {
                let (a, b) = candidates(buf, at);
                let fits = |e: &usize| *e >= at + 4 + FIXED && *e <= buf.len() && clean_tail(buf, *e);
                match [b, a].into_iter().flatten().find(fits) {
                    Some(end) => {
                        out.damaged.push(out.blocks.len() as u64 + 1);
                        end
                    }
                    // Neither framing works: a partial record from an interrupted append.
                    None => break,
                }
            }
        };
        let body = &buf[at + 4..end];
        out.blocks.push(parse_body(body, body.len() - FIXED));
        at = end;
    }
    out.valid_len = at as u64;
    out.truncated_bytes = (buf.len() - at) as u64;
    Ok(out)
}

#[derive(Debug)]
pub(super) struct LogFile {
    path: PathBuf,
    file: File,
}

impl LogFile {
    pub fn open(path: &Path) -> Result<(LogFile, LoadedLog), LogError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let loaded = match fs::read(path) {
            Ok(buf) if !buf.is_empty() => {
                let loaded = decode_log(&buf)?;
                if loaded.truncated_bytes > 0 {
                    let f = OpenOptions::new().write(true).open(path)?;
                    f.set_len(loaded.valid_len)?;
                }
                loaded
            }
            Ok(_) => {
                fs::write(path, encode_header())?;
                LoadedLog::default()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::write(path, encode_header())?;
                LoadedLog::default()
            }
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().append(true).open(path)?;
        Ok((LogFile { path: path.to_path_buf(), file }, loaded))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, b: &Block) -> io::Result<()> {
        self.file.write_all(&encode_record(b))
    }

    /// Replaces the file with the given blocks via a temporary file.
    pub fn rewrite<'a>(&mut self, blocks: impl Iterator<Item = &'a Block>) -> io::Result<()> {
        let mut buf = encode_header();
        for b in blocks {
            buf.extend_from_slice(&encode_record(b));
        }
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}
