//! Table-driven backend: deterministic canned replies per (role, ordinal).
//!
//! The per-role ordinal counters advance atomically, so concurrent callers
//! each claim a unique ordinal and the full call history can be audited
//! afterwards through the call log.

use super::{Backend, BackendError, ModelResponse, PromptRequest, RoleTag, ScriptTable};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// One issued call: the ordinal it claimed, the request as received, and the
/// reply it was served (`None` when the table had run out).
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub ordinal: usize,
    pub request: PromptRequest,
    pub reply: Option<String>,
}

/// Deterministic scripted model. Replies come from a [`ScriptTable`];
/// a call past the end of its lane is a hard error, never a silent default.
pub struct ScriptedBackend {
    table: ScriptTable,
    counters: [AtomicUsize; 3],
    log: Mutex<Vec<CallRecord>>,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        ScriptedBackend {
            table,
            counters: [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)],
            log: Mutex::new(Vec::new()),
        }
    }

    /// Every call issued so far, in arrival order.
    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    /// Calls issued under one role, in arrival order.
    pub fn calls_for(&self, role: RoleTag) -> Vec<CallRecord> {
        self.calls().into_iter().filter(|c| c.request.role == role).collect()
    }

    /// Number of calls issued under one role.
    pub fn count_for(&self, role: RoleTag) -> usize {
        self.counters[role.slot()].load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let role = request.role;
        let ordinal = self.counters[role.slot()].fetch_add(1, Ordering::SeqCst) + 1;
        let reply = self.table.get(role, ordinal).map(str::to_string);
        self.log.lock().expect("call log poisoned").push(CallRecord {
            ordinal,
            request: request.clone(),
            reply: reply.clone(),
        });
        match reply {
            Some(text) => Ok(ModelResponse::scripted(text)),
            None => Err(BackendError::ScriptExhausted { role, ordinal }),
        }
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}
