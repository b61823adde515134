//! OpenAI-compatible chat-completions driver.
//!
//! Sends `POST {base_url}/v1/chat/completions` with text and image content
//! parts in one user message. Local image paths are inlined as base64 data
//! URLs; http(s) and data URLs pass through. Transient failures (transport
//! errors, 429, 5xx) are retried with exponential backoff and full jitter.

use super::{Backend, BackendConfig, BackendError, ModelResponse, PromptRequest, TokenCounts};
use base64::Engine as _;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use std::path::Path;
use std::time::{Duration, Instant};

/// Base delay for the first retry; doubles per attempt, jittered to a
/// uniform draw over [0, delay).
const BACKOFF_BASE_SECS: f64 = 0.5;

pub struct HttpBackend {
    base_url: String,
    model_name: String,
    max_retries: u32,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let base_url = config
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::InvalidConfig("http backend needs a base_url".to_string()))?
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidConfig(format!("http client: {e}")))?;
        Ok(HttpBackend {
            base_url,
            model_name: config.model_name.clone(),
            max_retries: config.max_retries,
            api_key: config.api_key.clone(),
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    /// Chat-completions body: one user message whose content array carries
    /// the text parts in order, then the image parts in order.
    fn body_for(&self, request: &PromptRequest) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        for part in &request.text_parts {
            content.push(json!({ "type": "text", "text": part }));
        }
        for image_ref in &request.image_refs {
            let url = resolve_image_ref(image_ref)?;
            content.push(json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        let mut body = json!({
            "model": self.model_name,
            "messages": [ { "role": "user", "content": content } ],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn attempt(&self, body: &Value) -> Result<ModelResponse, AttemptError> {
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Err(AttemptError::Transient(format!("transport: {e}"))),
        };
        let status = resp.status();
        if status.is_success() {
            let raw = resp
                .text()
                .map_err(|e| AttemptError::Transient(format!("reading body: {e}")))?;
            return parse_chat_reply(&raw).map_err(AttemptError::Fatal);
        }
        let body_text = resp.text().unwrap_or_default();
        let code = status.as_u16();
        if code == 429 || status.is_server_error() {
            Err(AttemptError::TransientStatus { status: code, body: body_text })
        } else {
            Err(AttemptError::Fatal(BackendError::Endpoint { status: code, body: body_text }))
        }
    }
}

enum AttemptError {
    Transient(String),
    TransientStatus { status: u16, body: String },
    Fatal(BackendError),
}

impl Backend for HttpBackend {
    fn generate(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let body = self.body_for(request)?;
        let started = Instant::now();
        let attempts = self.max_retries + 1;
        let mut last: Option<AttemptError> = None;
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(mut resp) => {
                    resp.latency = started.elapsed().as_secs_f64();
                    return Ok(resp);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(transient) => {
                    last = Some(transient);
                    if attempt + 1 < attempts {
                        std::thread::sleep(jittered_backoff(attempt));
                    }
                }
            }
        }
        match last.expect("at least one attempt ran") {
            AttemptError::Transient(message) => Err(BackendError::Transport { attempts, message }),
            AttemptError::TransientStatus { status, body } => {
                Err(BackendError::Endpoint { status, body })
            }
            AttemptError::Fatal(e) => Err(e),
        }
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}

/// Full jitter: uniform over [0, base * 2^attempt).
fn jittered_backoff(attempt: u32) -> Duration {
    let cap = BACKOFF_BASE_SECS * f64::powi(2.0, attempt as i32);
    let secs = rand::rng().random_range(0.0..cap);
    Duration::from_secs_f64(secs)
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_chat_reply(raw: &str) -> Result<ModelResponse, BackendError> {
    let reply: ChatReply = serde_json::from_str(raw)
        .map_err(|e| BackendError::MalformedResponse(format!("{e}; body: {}", clip(raw, 200))))?;
    let choice = reply
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices in reply".to_string()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| BackendError::MalformedResponse("choice carries no content".to_string()))?;
    let usage = reply.usage.unwrap_or_default();
    Ok(ModelResponse {
        text,
        latency: 0.0,
        tokens: TokenCounts { prompt: usage.prompt_tokens, completion: usage.completion_tokens },
    })
}

fn clip(s: &str, limit: usize) -> &str {
    match s.char_indices().nth(limit) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Remote and data URLs pass through; anything else is treated as a local
/// file and inlined as a base64 data URL.
pub(crate) fn resolve_image_ref(image_ref: &str) -> Result<String, BackendError> {
    if image_ref.starts_with("http://")
        || image_ref.starts_with("https://")
        || image_ref.starts_with("data:")
    {
        return Ok(image_ref.to_string());
    }
    let bytes = std::fs::read(image_ref).map_err(|e| {
        BackendError::InvalidConfig(format!("cannot read image '{image_ref}': {e}"))
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for_path(image_ref)))
}

fn mime_for_path(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RoleTag, Sampling};
    use std::io::Write;

    #[test]
    fn body_orders_text_then_images() {
        let config = BackendConfig::http("http://localhost:1", "test-model");
        let b = HttpBackend::new(&config).unwrap();
        let req = PromptRequest::new(RoleTag::Cie, "describe the scene")
            .with_image("https://example.test/cat.png")
            .with_sampling(Sampling { temperature: 0.0, max_tokens: 64, seed: Some(7) });
        let body = b.body_for(&req).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["seed"], 7);
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert_eq!(content[1]["image_url"]["url"], "https://example.test/cat.png");
    }

    #[test]
    fn seed_omitted_when_absent() {
        let config = BackendConfig::http("http://localhost:1/", "m");
        let b = HttpBackend::new(&config).unwrap();
        let body = b.body_for(&PromptRequest::new(RoleTag::Rdu, "q")).unwrap();
        assert!(body.get("seed").is_none());
        assert_eq!(b.endpoint(), "http://localhost:1/v1/chat/completions");
    }

    #[test]
    fn local_images_become_data_urls() {
        let mut f = tempfile::Builder::new().suffix(".png").tempfile().unwrap();
        f.write_all(&[0x89, b'P', b'N', b'G']).unwrap();
        let url = resolve_image_ref(f.path().to_str().unwrap()).unwrap();
        assert!(url.starts_with("data:image/png;base64,"), "{url}");
        assert!(resolve_image_ref("/no/such/file.png").is_err());
        assert_eq!(resolve_image_ref("data:image/png;base64,AAAA").unwrap(), "data:image/png;base64,AAAA");
    }

    #[test]
    fn chat_reply_parsing() {
        let ok = r#"{"choices":[{"message":{"content":"red"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;
        let r = parse_chat_reply(ok).unwrap();
        assert_eq!(r.text, "red");
        assert_eq!(r.tokens.prompt, 12);
        assert_eq!(r.tokens.completion, 3);

        let no_usage = r#"{"choices":[{"message":{"content":"red"}}]}"#;
        assert_eq!(parse_chat_reply(no_usage).unwrap().tokens, TokenCounts::default());

        assert!(parse_chat_reply(r#"{"choices":[]}"#).is_err());
        assert!(parse_chat_reply("garbage").is_err());
    }
}
