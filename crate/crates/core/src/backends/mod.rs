//! Chat backends.
//!
//! Every agent talks to a model through [`ChatBackend::complete`], a blocking
//! whole-message call. Implementations:
//!
//! - [`HttpBackend`]: live providers over two wire dialects (OpenAI-style chat
//!   completions and Anthropic-style messages), with retry, a per-descriptor
//!   in-flight limit and an optional token bucket.
//! - [`ScriptedBackend`]: replies from a fixed list, for tests.
//! - [`FnBackend`]: replies computed by a closure over the request.
//! - [`RecordingBackend`] / [`ReplayBackend`]: cassette record and replay,
//!   matched by a hash of the canonical request.

mod canonical;
mod cassette;
mod http;
mod limiter;
mod retry;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{canonicalize, request_hash};
pub use cassette::{CassetteEntry, CassetteWriter, RecordingBackend, ReplayBackend};
pub use http::HttpBackend;
pub use limiter::{ConcurrencyLimiter, TokenBucket};
pub use retry::{RetryPolicy, Sleeper};
pub use scripted::{FnBackend, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl fmt::Display for MessageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttachmentSource {
    Bytes {
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Url { url: String },
}

impl fmt::Debug for AttachmentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachmentSource::Bytes { data } => write!(f, "Bytes({} bytes)", data.len()),
            AttachmentSource::Url { url } => write!(f, "Url({url})"),
        }
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

/// An image attached to a message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub media_type: String,
    pub source: AttachmentSource,
}

impl Attachment {
    /// Loads a local file or keeps an http(s) URL as a reference.
    pub fn load(uri: &str, media_type: &str, base_dir: &Path) -> std::io::Result<Self> {
        let source = if uri.starts_with("http://") || uri.starts_with("https://") {
            AttachmentSource::Url { url: uri.to_string() }
        } else {
            AttachmentSource::Bytes { data: std::fs::read(base_dir.join(uri))? }
        };
        Ok(Attachment { media_type: media_type.to_string(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
}

impl ChatMessage {
    pub fn new(role: MessageRole, text: impl Into<String>) -> Self {
        ChatMessage { role, text: text.into(), attachments: Vec::new() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(MessageRole::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(MessageRole::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(MessageRole::Assistant, text)
    }

    pub fn with_attachments(mut self, attachments: Vec<Attachment>) -> Self {
        self.attachments = attachments;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_chars: Option<u32>,
    /// Ask for temperature-0 style decoding.
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Generation {
    fn default() -> Self {
        Generation { max_output_chars: None, deterministic: true, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub generation: Generation,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest { messages, generation: Generation::default() }
    }

    pub fn with_generation(mut self, generation: Generation) -> Self {
        self.generation = generation;
        self
    }

    pub fn has_attachments(&self) -> bool {
        self.messages.iter().any(|m| !m.attachments.is_empty())
    }

    /// Checks the request invariants: non-empty, system message first.
    pub fn check(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::InvalidRequest("request has no messages".into())),
            Some(m) if m.role != MessageRole::System => Err(BackendError::InvalidRequest(
                "first message must be the system message".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Total characters across message texts.
    pub fn text_chars(&self) -> u64 {
        self.messages.iter().map(|m| m.text.chars().count() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_units: u64,
    pub output_units: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.input_units += rhs.input_units;
        self.output_units += rhs.output_units;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider rejected request ({status}): {body}")]
    Provider { status: u16, body: String },
    #[error("scripted backend `{backend}` has no more replies")]
    FixtureExhausted { backend: String },
    #[error("no recorded response for request hash {hash}")]
    ReplayMiss { hash: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Whether image attachments may be sent.
    fn multimodal(&self) -> bool {
        false
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn multimodal(&self) -> bool {
        (**self).multimodal()
    }
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Descriptors and registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wire {
    OpenaiChatCompatible,
    AnthropicMessagesCompatible,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimits {
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl Default for RateLimits {
    fn default() -> Self {
        RateLimits { max_in_flight: default_in_flight(), requests_per_minute: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub wire: Wire,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Where to find the API key, e.g. `ENV:PROVIDER_KEY`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_ref: Option<String>,
    #[serde(default)]
    pub multimodal: bool,
    /// Reply list (scripted) or cassette (replay).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub limits: RateLimits,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        let missing = |what: &str| {
            Err(BackendError::Config(format!("backend `{}` needs {what}", self.name)))
        };
        match self.wire {
            Wire::Scripted | Wire::Replay if self.fixture.is_none() => missing("a fixture path"),
            Wire::OpenaiChatCompatible | Wire::AnthropicMessagesCompatible => {
                if self.endpoint.is_none() {
                    missing("an endpoint")
                } else if self.credential_ref.is_none() {
                    missing("a credential_ref")
                } else if self.model.is_none() {
                    missing("a model")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the backend. Relative fixture paths resolve against
    /// `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.validate()?;
        let fixture = || base_dir.join(self.fixture.as_ref().expect("validated"));
        Ok(match self.wire {
            Wire::Scripted => Arc::new(
                ScriptedBackend::from_file(&self.name, &fixture())?.multimodal(self.multimodal),
            ),
            Wire::Replay => Arc::new(
                ReplayBackend::from_file(&self.name, &fixture())?.multimodal(self.multimodal),
            ),
            Wire::OpenaiChatCompatible | Wire::AnthropicMessagesCompatible => {
                Arc::new(HttpBackend::new(self.clone())?)
            }
        })
    }
}

/// Named backends shared by the agents of an experiment.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_descriptors(
        descriptors: &[BackendDescriptor],
        base_dir: &Path,
    ) -> Result<Self, BackendError> {
        let mut registry = Self::new();
        for d in descriptors {
            registry.insert(d.name.clone(), d.build(base_dir)?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, name: impl Into<String>, backend: Arc<dyn ChatBackend>) {
        self.backends.insert(name.into(), backend);
    }

    pub fn with(mut self, name: impl Into<String>, backend: Arc<dyn ChatBackend>) -> Self {
        self.insert(name, backend);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.backends
            .get(name)
            .cloned()
            .ok_or_else(|| BackendError::Config(format!("unknown backend `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    /// Wraps every backend so its calls are appended to `writer`.
    pub fn recording(&self, writer: Arc<CassetteWriter>) -> Self {
        let backends = self
            .backends
            .iter()
            .map(|(name, inner)| {
                let wrapped: Arc<dyn ChatBackend> =
                    Arc::new(RecordingBackend::new(inner.clone(), writer.clone()));
                (name.clone(), wrapped)
            })
            .collect();
        BackendRegistry { backends }
    }

    /// Same names, every one served by `backend`.
    pub fn replaced_by(&self, backend: Arc<dyn ChatBackend>) -> Self {
        let backends = self.backends.keys().map(|n| (n.clone(), backend.clone())).collect();
        BackendRegistry { backends }
    }
}
