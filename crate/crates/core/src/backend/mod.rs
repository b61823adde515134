//! Model backends: the only layer that talks to a (real or simulated) LVLM.
//!
//! Every upstream stage (decomposition, inference, assessment) issues
//! [`PromptRequest`]s through the [`Backend`] trait and consumes plain
//! [`ModelResponse`]s. Swapping a served model for the table-driven scripted
//! backend therefore changes no orchestration code, which is what makes the
//! whole refinement loop bit-reproducible in tests.

mod http;
mod scripted;
mod transcript;

pub use http::HttpBackend;
pub use scripted::{CallRecord, ScriptedBackend};
pub use transcript::{RecordingBackend, ReplayBackend, TranscriptEntry};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Which pipeline stage a request comes from. Scripted tables and transcripts
/// are keyed per role, so the same ordinal can exist under each tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    /// Reasoning decomposition.
    Rdu,
    /// Contextual inference (step answers and final synthesis).
    Cie,
    /// Coherence assessment.
    Cam,
}

impl RoleTag {
    pub const ALL: [RoleTag; 3] = [RoleTag::Rdu, RoleTag::Cie, RoleTag::Cam];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Rdu => "rdu",
            RoleTag::Cie => "cie",
            RoleTag::Cam => "cam",
        }
    }

    pub(crate) fn slot(self) -> usize {
        match self {
            RoleTag::Rdu => 0,
            RoleTag::Cie => 1,
            RoleTag::Cam => 2,
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoding controls forwarded to the model. Greedy decoding by default so
/// repeated runs against a pinned endpoint stay comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { temperature: 0.0, max_tokens: 512, seed: None }
    }
}

/// One prompt: ordered text parts plus ordered image references.
///
/// Image refs are opaque here; the HTTP backend resolves local paths to
/// inline data URLs at request time, everything else passes through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub role: RoleTag,
    pub text_parts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
    pub sampling: Sampling,
}

impl PromptRequest {
    pub fn new(role: RoleTag, text: impl Into<String>) -> Self {
        PromptRequest {
            role,
            text_parts: vec![text.into()],
            image_refs: Vec::new(),
            sampling: Sampling::default(),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_refs.push(image_ref.into());
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    /// All text parts as one string, for inspection and logging.
    pub fn joined_text(&self) -> String {
        self.text_parts.join("\n\n")
    }
}

/// Prompt and completion token usage as reported by the endpoint; zero when
/// the source cannot know (scripted tables, endpoints without usage info).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

/// What came back: raw text, wall seconds spent obtaining it (including
/// retries), token usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency: f64,
    pub tokens: TokenCounts,
}

impl ModelResponse {
    /// A zero-cost response, as produced by scripted tables.
    pub fn scripted(text: impl Into<String>) -> Self {
        ModelResponse { text: text.into(), latency: 0.0, tokens: TokenCounts::default() }
    }
}

/// Ordered canned replies per role. Ordinals are 1-based: the first `cie`
/// call consumes `cie[0]` under ordinal 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptTable {
    #[serde(default)]
    pub rdu: Vec<String>,
    #[serde(default)]
    pub cie: Vec<String>,
    #[serde(default)]
    pub cam: Vec<String>,
}

impl ScriptTable {
    pub fn new() -> Self {
        ScriptTable::default()
    }

    pub fn push(&mut self, role: RoleTag, reply: impl Into<String>) {
        self.lane_mut(role).push(reply.into());
    }

    /// Reply for the `ordinal`-th call (1-based) under `role`.
    pub fn get(&self, role: RoleTag, ordinal: usize) -> Option<&str> {
        if ordinal == 0 {
            return None;
        }
        self.lane(role).get(ordinal - 1).map(String::as_str)
    }

    pub fn lane(&self, role: RoleTag) -> &[String] {
        match role {
            RoleTag::Rdu => &self.rdu,
            RoleTag::Cie => &self.cie,
            RoleTag::Cam => &self.cam,
        }
    }

    fn lane_mut(&mut self, role: RoleTag) -> &mut Vec<String> {
        match role {
            RoleTag::Rdu => &mut self.rdu,
            RoleTag::Cie => &mut self.cie,
            RoleTag::Cam => &mut self.cam,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.rdu.len() + self.cie.len() + self.cam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_count() == 0
    }

    pub fn from_json(raw: &str) -> Result<Self, BackendError> {
        serde_json::from_str(raw)
            .map_err(|e| BackendError::InvalidConfig(format!("bad script table: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script table serialization is infallible")
    }
}

/// How to reach a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

/// Backend settings; the `script` table is only meaningful for
/// [`BackendKind::Scripted`], `base_url` only for [`BackendKind::Http`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptTable>,
    /// Bearer token for the endpoint. Resolved from `CMRF_API_KEY` by the
    /// CLI; never written into traces or reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_max_retries() -> u32 {
    2
}

impl BackendConfig {
    pub fn scripted(table: ScriptTable) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            base_url: None,
            model_name: "scripted".to_string(),
            timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
            script: Some(table),
            api_key: None,
        }
    }

    pub fn http(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            model_name: model_name.into(),
            timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
            script: None,
            api_key: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Scripted => {
                if self.script.is_none() {
                    return Err(BackendError::InvalidConfig(
                        "scripted backend needs a script table".to_string(),
                    ));
                }
            }
            BackendKind::Http => {
                if self.base_url.as_deref().map_or(true, |u| u.trim().is_empty()) {
                    return Err(BackendError::InvalidConfig(
                        "http backend needs a base_url".to_string(),
                    ));
                }
            }
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return Err(BackendError::InvalidConfig(format!(
                "timeout_secs must be positive, got {}",
                self.timeout_secs
            )));
        }
        Ok(())
    }
}

/// Backend failure modes. Retry handling lives inside the HTTP backend;
/// everything surfacing here is final for the request.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("script exhausted: no reply for {role} call #{ordinal}")]
    ScriptExhausted { role: RoleTag, ordinal: usize },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("endpoint reply not understood: {0}")]
    MalformedResponse(String),
    #[error("replay mismatch: no recorded pair for {role} call #{ordinal}")]
    ReplayMismatch { role: RoleTag, ordinal: usize },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
}

/// A model driver. `generate` must tolerate concurrent callers and never
/// mutate the request.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError>;

    /// Stable tag for traces ("scripted", "http", "recording", "replay").
    fn kind(&self) -> &'static str;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        (**self).generate(request)
    }

    fn kind(&self) -> &'static str {
        (**self).kind()
    }
}

/// Builds the backend a config describes.
pub fn make_backend(config: &BackendConfig) -> Result<Arc<dyn Backend>, BackendError> {
    config.validate()?;
    match config.kind {
        BackendKind::Scripted => {
            let table = config.script.clone().expect("validated above");
            Ok(Arc::new(ScriptedBackend::new(table)))
        }
        BackendKind::Http => Ok(Arc::new(HttpBackend::new(config)?)),
    }
}
