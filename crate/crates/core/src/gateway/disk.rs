//! Persistence layout of one node:
//!
//! ```text
//! <data>/chain.log       block log
//! <data>/engine.db       engine snapshot (includes lastBlockHash)
//! <data>/consensus.log   view configuration and stable checkpoint
//! ```
//!
//! Small files are replaced atomically through a temporary file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::blockstore::{ChainError, ChainStore, OpenReport};
use crate::ordering::PersistentState;

pub struct Disk {
    pub chain: ChainStore,
    dir: Option<PathBuf>,
    engine: Option<Vec<u8>>,
    consensus: Option<PersistentState>,
}

#[derive(Debug, thiserror::Error)]
pub enum DiskError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DiskError> {
    let tmp = path.with_extension("tmp");
    let io_err = |source| DiskError::Io { path: path.to_path_buf(), source };
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

impl Disk {
    pub fn memory() -> Self {
        Disk { chain: ChainStore::memory(), dir: None, engine: None, consensus: None }
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<(Self, OpenReport), DiskError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| DiskError::Io { path: dir.clone(), source })?;
        let (chain, report) = ChainStore::open(dir.join("chain.log"))?;
        let engine = fs::read(dir.join("engine.db")).ok();
        let consensus = fs::read(dir.join("consensus.log")).ok().and_then(|b| serde_json::from_slice(&b).ok());
        Ok((Disk { chain, dir: Some(dir), engine, consensus }, report))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn engine(&self) -> Option<&[u8]> {
        self.engine.as_deref()
    }

    pub fn consensus(&self) -> Option<&PersistentState> {
        self.consensus.as_ref()
    }

    pub fn save_engine(&mut self, bytes: Vec<u8>) -> Result<(), DiskError> {
        if let Some(d) = &self.dir {
            write_atomic(&d.join("engine.db"), &bytes)?;
        }
        self.engine = Some(bytes);
        Ok(())
    }

    pub fn save_consensus(&mut self, state: &PersistentState) -> Result<(), DiskError> {
        if let Some(d) = &self.dir {
            write_atomic(&d.join("consensus.log"), &serde_json::to_vec(state).expect("state serializes"))?;
        }
        self.consensus = Some(state.clone());
        Ok(())
    }

    /// Deletes chain, engine database and consensus state.
    pub fn wipe(&mut self) -> Result<(), DiskError> {
        self.chain.wipe()?;
        if let Some(d) = &self.dir {
            for f in ["engine.db", "consensus.log"] {
                match fs::remove_file(d.join(f)) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(source) => return Err(DiskError::Io { path: d.join(f), source }),
                }
            }
        }
        self.engine = None;
        self.consensus = None;
        Ok(())
    }
}
