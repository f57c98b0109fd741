//! Served requests, kept so feedback can be checked against what was shown.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rqa_core::corpus::Domain;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedRequest {
    pub request_id: String,
    pub question: String,
    pub domain: Domain,
    pub passage_ids: Vec<String>,
    /// Unix time in milliseconds.
    pub served_at_ms: u64,
    /// Serving configuration that produced the answers.
    pub pipeline: String,
}

pub enum Lookup {
    Found(ServedRequest),
    Expired,
    Unknown,
}

/// Request registry backed by an append-only log.
pub struct RequestLog {
    ttl_ms: u64,
    inner: Mutex<(File, HashMap<String, ServedRequest>)>,
}

const PRUNE_THRESHOLD: usize = 50_000;

impl RequestLog {
    pub fn open(path: impl AsRef<Path>, ttl_secs: u64) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let mut map = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let req: ServedRequest = serde_json::from_str(&line)?;
                map.insert(req.request_id.clone(), req);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RequestLog {
            ttl_ms: ttl_secs.saturating_mul(1000),
            inner: Mutex::new((file, map)),
        })
    }

    fn expired(&self, req: &ServedRequest, now_ms: u64) -> bool {
        now_ms.saturating_sub(req.served_at_ms) > self.ttl_ms
    }

    pub fn record(&self, req: ServedRequest, now_ms: u64) -> Result<(), ServiceError> {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (file, map) = &mut *guard;
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        if map.len() >= PRUNE_THRESHOLD {
            let ttl = self.ttl_ms;
            map.retain(|_, r| now_ms.saturating_sub(r.served_at_ms) <= ttl);
        }
        map.insert(req.request_id.clone(), req);
        Ok(())
    }

    pub fn lookup(&self, request_id: &str, now_ms: u64) -> Lookup {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        match guard.1.get(request_id) {
            Some(r) if self.expired(r, now_ms) => Lookup::Expired,
            Some(r) => Lookup::Found(r.clone()),
            None => Lookup::Unknown,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: &str, at: u64) -> ServedRequest {
        ServedRequest {
            request_id: id.into(),
            question: "q".into(),
            domain: Domain::Who,
            passage_ids: vec!["a".into()],
            served_at_ms: at,
            pipeline: "retriever_only".into(),
        }
    }

    #[test]
    fn expiry_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let log = RequestLog::open(&path, 10).unwrap();
        log.record(req("r1", 1_000), 1_000).unwrap();
        assert!(matches!(log.lookup("r1", 11_000), Lookup::Found(_)));
        assert!(matches!(log.lookup("r1", 11_001), Lookup::Expired));
        assert!(matches!(log.lookup("r2", 0), Lookup::Unknown));
        drop(log);
        let log = RequestLog::open(&path, 10).unwrap();
        assert!(matches!(log.lookup("r1", 2_000), Lookup::Found(r) if r == req("r1", 1_000)));
    }
}
