//! On-disk embedding cache.
//!
//! One file per entry, named by the hex SHA-256 of
//! `(backend fingerprint, method id, demonstration id, sentence)`. An entry
//! holds the magic `SEC1`, a little-endian `u32` dimension and the vector as
//! little-endian `f32`. Writers take an exclusive lock on `<dir>/.lock` and
//! publish entries by rename; readers take a shared lock.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SEC1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt cache entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(backend_id: &str, method_id: &str, demo_id: &str, sentence: &str) -> Self {
        let mut h = Sha256::new();
        for part in [backend_id, method_id, demo_id, sentence] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        Self(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_entry(values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_entry(bytes: &[u8]) -> Result<Vec<f32>, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("bad header".into());
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != dim * 4 {
        return Err(format!(
            "dimension {dim} needs {} payload bytes, found {}",
            dim * 4,
            payload.len()
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(&key.0)
    }

    fn lock_file(&self) -> Result<File, CacheError> {
        let path = self.dir.join(".lock");
        OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<f64>>, CacheError> {
        let path = self.entry_path(key);
        let lock = self.lock_file()?;
        lock.lock_shared().map_err(io_err(&path))?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        drop(lock);
        let values = decode_entry(&bytes).map_err(|reason| CacheError::Corrupt {
            path: path.clone(),
            reason,
        })?;
        Ok(Some(values.into_iter().map(f64::from).collect()))
    }

    /// Stores `values` as `f32` and returns exactly what a later `get` will yield.
    pub fn put(&self, key: &CacheKey, values: &[f64]) -> Result<Vec<f64>, CacheError> {
        let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry has a shard directory");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let lock = self.lock_file()?;
        lock.lock().map_err(io_err(&path))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode_entry(&narrowed)).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        drop(lock);
        Ok(narrowed.into_iter().map(f64::from).collect())
    }
}
