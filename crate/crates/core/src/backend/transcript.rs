//! Transcript capture and deterministic replay.
//!
//! A recording backend wraps a live one and appends every successful
//! (request, response) pair as one JSON line, keyed by role and per-role
//! ordinal. A replay backend serves those pairs back in the same per-role
//! order without touching the network, so a captured session re-runs
//! bit-identically.

use super::{Backend, BackendError, ModelResponse, PromptRequest, RoleTag};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: RoleTag,
    pub ordinal: usize,
    pub request: PromptRequest,
    pub response: ModelResponse,
}

/// Wraps another backend and writes every successful exchange to a JSONL
/// transcript. Lines are flushed per call so a crashed run keeps what it saw.
pub struct RecordingBackend<B: Backend> {
    inner: B,
    counters: [AtomicUsize; 3],
    sink: Mutex<BufWriter<File>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn create(inner: B, path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let file = File::create(path)?;
        Ok(RecordingBackend {
            inner,
            counters: [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)],
            sink: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let ordinal = self.counters[request.role.slot()].fetch_add(1, Ordering::SeqCst) + 1;
        let response = self.inner.generate(request)?;
        let entry = TranscriptEntry {
            role: request.role,
            ordinal,
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| BackendError::InvalidConfig(format!("transcript encode: {e}")))?;
        {
            let mut sink = self.sink.lock().expect("transcript sink poisoned");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        Ok(response)
    }

    fn kind(&self) -> &'static str {
        "recording"
    }
}

/// Serves recorded responses by (role, per-role ordinal). Any request the
/// transcript has no pair for is a replay mismatch, including calls past the
/// end of a lane.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: HashMap<(RoleTag, usize), ModelResponse>,
    counters: [AtomicUsize; 3],
}

impl ReplayBackend {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let file = File::open(path)?;
        let mut entries = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| {
                BackendError::InvalidConfig(format!("transcript line {}: {e}", lineno + 1))
            })?;
            if entries.insert((entry.role, entry.ordinal), entry.response).is_some() {
                return Err(BackendError::InvalidConfig(format!(
                    "transcript line {}: duplicate pair for {} call #{}",
                    lineno + 1,
                    entry.role,
                    entry.ordinal
                )));
            }
        }
        Ok(ReplayBackend {
            entries,
            counters: [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let role = request.role;
        let ordinal = self.counters[role.slot()].fetch_add(1, Ordering::SeqCst) + 1;
        self.entries
            .get(&(role, ordinal))
            .cloned()
            .ok_or(BackendError::ReplayMismatch { role, ordinal })
    }

    fn kind(&self) -> &'static str {
        "replay"
    }
}
