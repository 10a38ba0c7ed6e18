use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AdapterKind, ChatResponse, ModelRole, Usage};
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub text: String,
    pub usage: Usage,
}

/// Completion cache keyed by request digest, persisted as JSONL.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, CacheEntry>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Opens (or starts) the cache file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.exists() {
            for entry in read_jsonl::<CacheEntry>(&path)? {
                entries.insert(entry.digest.clone(), entry);
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        self.lock().get(digest).cloned()
    }

    pub fn insert(&self, digest: &str, text: &str, usage: Usage) {
        self.lock().insert(
            digest.to_string(),
            CacheEntry {
                digest: digest.to_string(),
                text: text.to_string(),
                usage,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrites the cache file in digest order, atomically.
    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut buf = Vec::new();
        for entry in self.lock().values() {
            serde_json::to_writer(&mut buf, entry)?;
            buf.push(b'\n');
        }
        write_atomic(path, &buf)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, CacheEntry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// One line of the response log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub role: ModelRole,
    pub adapter: AdapterKind,
    pub digest: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

struct LogInner {
    file: Option<File>,
    path: Option<PathBuf>,
    records: Vec<ResponseRecord>,
}

/// Append-only record of every response the gateway returned.
pub struct ResponseLog {
    inner: Mutex<LogInner>,
}

impl std::fmt::Debug for ResponseLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResponseLog").finish_non_exhaustive()
    }
}

impl ResponseLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(LogInner {
                file: None,
                path: None,
                records: Vec::new(),
            }),
        }
    }

    /// Opens `path` for appending, keeping whatever it already holds.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = if path.exists() {
            Self::read(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            inner: Mutex::new(LogInner {
                file: Some(file),
                path: Some(path),
                records,
            }),
        })
    }

    pub fn read(path: &Path) -> Result<Vec<ResponseRecord>> {
        read_jsonl(path)
    }

    pub(crate) fn record(&self, role: ModelRole, digest: &str, resp: &ChatResponse) -> Result<()> {
        let rec = ResponseRecord {
            role,
            adapter: resp.adapter,
            digest: digest.to_string(),
            input_tokens: resp.usage.input_tokens,
            output_tokens: resp.usage.output_tokens,
        };
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            let res = file.write_all(&line);
            if let Err(e) = res {
                let path = inner.path.clone().unwrap_or_default();
                return Err(Error::io(path, e));
            }
        }
        inner.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> Vec<ResponseRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .records
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        cache.insert("d1", "hello", Usage { input_tokens: 2, output_tokens: 1 });
        cache.flush().unwrap();
        let again = ResponseCache::open(&path).unwrap();
        assert_eq!(again.get("d1").unwrap().text, "hello");
        assert!(!path.with_extension("jsonl.tmp").exists());
    }

    #[test]
    fn log_appends_across_opens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        let resp = ChatResponse {
            text: "x".into(),
            usage: Usage { input_tokens: 3, output_tokens: 4 },
            adapter: AdapterKind::Scripted,
        };
        ResponseLog::open(&path).unwrap().record(ModelRole::Target, "a", &resp).unwrap();
        let log = ResponseLog::open(&path).unwrap();
        log.record(ModelRole::Optimizer, "b", &resp).unwrap();
        assert_eq!(log.records().len(), 2);
        assert_eq!(ResponseLog::read(&path).unwrap().len(), 2);
    }
}
