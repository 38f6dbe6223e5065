use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{CacheKey, CompletionResponse, TokenDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePayload {
    Completion(CompletionResponse),
    Tokens(TokenDistribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub created_at: DateTime<Utc>,
    pub payload: CachePayload,
}

/// Content-addressed response store: one immutable JSON file per key digest.
#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, String> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(|e| format!("{}: {e}", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, String> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(format!("{}: {e}", path.display())),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| format!("corrupt cache entry {}: {e}", path.display()))?;
        if &entry.key != key {
            return Err(format!("cache entry {} does not match its key", path.display()));
        }
        Ok(Some(entry))
    }

    /// Stores `entry` unless the key is already present. Returns whichever
    /// entry ends up on disk, so concurrent writers agree on one value.
    pub fn put(&self, entry: CacheEntry) -> Result<CacheEntry, String> {
        let path = self.path_for(&entry.key);
        let bytes = serde_json::to_vec(&entry).map_err(|e| e.to_string())?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)
            .map_err(|e| format!("{}: {e}", self.root.display()))?;
        tmp.write_all(&bytes).map_err(|e| e.to_string())?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(entry),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => self
                .get(&entry.key)?
                .ok_or_else(|| format!("{} vanished", path.display())),
            Err(e) => Err(format!("{}: {}", path.display(), e.error)),
        }
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.root)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
