use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use super::{Capability, ImageRef, ModelRequest, ModelResponse};
use crate::error::{Error, Result};

/// One cached response. The request prompt is stored verbatim for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub capability: Capability,
    pub backend_id: String,
    pub prompt: String,
    pub image_ref: Option<ImageRef>,
    pub response: ModelResponse,
    pub created_at: u64,
}

impl CacheEntry {
    pub fn new(key: String, req: &ModelRequest, response: ModelResponse) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        CacheEntry {
            key,
            capability: req.capability,
            backend_id: req.backend_id.clone(),
            prompt: req.prompt.clone(),
            image_ref: req.image_ref.clone(),
            response,
            created_at,
        }
    }
}

/// Append-only response store, optionally backed by a line-per-entry log.
///
/// Readers run concurrently; appends are serialised. The first entry recorded
/// for a key wins, so identical requests always see identical responses.
pub struct ResponseCache {
    entries: RwLock<HashMap<String, CacheEntry>>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            entries: RwLock::new(HashMap::new()),
            log: None,
            path: None,
        }
    }

    /// Load every entry of `path` (if it exists) and append new ones to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            // A process killed mid-append leaves an unterminated last line; drop it.
            let complete = match text.rfind('\n') {
                Some(end) => end + 1,
                None => 0,
            };
            if complete < text.len() {
                log::warn!("dropping truncated final cache line in {}", path.display());
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
            }
            for (i, line) in text[..complete].lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                    source_name: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                entries.entry(entry.key.clone()).or_insert(entry);
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ResponseCache {
            entries: RwLock::new(entries),
            log: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append unless the key is already present; returns the stored entry.
    pub fn insert(&self, entry: CacheEntry) -> Result<CacheEntry> {
        let mut map = self.entries.write().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = map.get(&entry.key) {
            return Ok(existing.clone());
        }
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let mut f = log.lock().unwrap_or_else(|e| e.into_inner());
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(self.path.clone().unwrap_or_default(), e))?;
        }
        map.insert(entry.key.clone(), entry.clone());
        Ok(entry)
    }

    /// Order-independent digest over (key, response) pairs. Latency is
    /// measurement noise and is left out.
    pub fn content_digest(&self) -> String {
        let map = self.entries.read().unwrap_or_else(|e| e.into_inner());
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        let mut buf = String::new();
        for k in keys {
            buf.push_str(k);
            buf.push('\t');
            let response = ModelResponse {
                latency_ms: 0,
                ..map[k].response.clone()
            };
            buf.push_str(&serde_json::to_string(&response).unwrap_or_default());
            buf.push('\n');
        }
        crate::digest::sha256_hex(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_survives_reopen_and_first_entry_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let req = ModelRequest::new("b", Capability::TextGen, "p");
        {
            let c = ResponseCache::open(&path).unwrap();
            c.insert(CacheEntry::new("k".into(), &req, ModelResponse::text("one"))).unwrap();
            let kept = c.insert(CacheEntry::new("k".into(), &req, ModelResponse::text("two"))).unwrap();
            assert_eq!(kept.response.text.as_deref(), Some("one"));
        }
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("k").unwrap().prompt, "p");
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }
}
