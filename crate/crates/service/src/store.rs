//! Append-only JSONL feedback store with a single writer.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rqa_core::corpus::Domain;
use rqa_core::feedback::{read_feedback, FeedbackRecord};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Per-domain record counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub per_domain: BTreeMap<String, usize>,
}

impl Stats {
    /// Counts `records`, listing every domain in `domains` even when empty.
    pub fn replay<'a>(records: impl IntoIterator<Item = &'a FeedbackRecord>, domains: &[Domain]) -> Self {
        let mut per_domain: BTreeMap<String, usize> = domains.iter().map(|d| (d.to_string(), 0)).collect();
        let mut total = 0;
        for r in records {
            *per_domain.entry(r.domain.to_string()).or_default() += 1;
            total += 1;
        }
        Stats { total, per_domain }
    }
}

/// Identifies one card submission from one client session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct DedupKey {
    request_id: String,
    passage_id: String,
    session: String,
}

impl DedupKey {
    fn of(record: &FeedbackRecord) -> Option<Self> {
        Some(DedupKey {
            request_id: record.request_id.clone()?,
            passage_id: record.passage_id.clone(),
            session: record.worker_id.clone(),
        })
    }
}

#[derive(Debug)]
pub enum AppendOutcome {
    Stored { total: usize },
    Duplicate,
}

struct Inner {
    file: File,
    stats: Stats,
    seen: HashSet<DedupKey>,
}

pub struct FeedbackStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl FeedbackStore {
    /// Opens or creates the store and replays it.
    pub fn open(path: impl AsRef<Path>, domains: &[Domain]) -> Result<Self, ServiceError> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() { read_feedback(&path)? } else { Vec::new() };
        let stats = Stats::replay(&records, domains);
        let seen = records.iter().filter_map(DedupKey::of).collect();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(FeedbackStore {
            path,
            inner: Mutex::new(Inner { file, stats, seen }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends unless a record with the same request, passage and session
    /// is already stored.
    pub fn append(&self, record: &FeedbackRecord) -> Result<AppendOutcome, ServiceError> {
        let mut inner = self.lock();
        let key = DedupKey::of(record);
        if key.as_ref().is_some_and(|k| inner.seen.contains(k)) {
            return Ok(AppendOutcome::Duplicate);
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        inner.file.write_all(line.as_bytes())?;
        inner.file.flush()?;
        if let Some(k) = key {
            inner.seen.insert(k);
        }
        inner.stats.total += 1;
        *inner.stats.per_domain.entry(record.domain.to_string()).or_default() += 1;
        Ok(AppendOutcome::Stored { total: inner.stats.total })
    }

    pub fn stats(&self) -> Stats {
        self.lock().stats.clone()
    }

    pub fn count(&self) -> usize {
        self.lock().stats.total
    }

    /// Every stored record, read while no write is in progress.
    pub fn snapshot(&self) -> Result<Vec<FeedbackRecord>, ServiceError> {
        let _guard = self.lock();
        Ok(read_feedback(&self.path)?)
    }
}
