use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::limiter::{ConcurrencyLimiter, TokenBucket};
use super::retry::RetryPolicy;
use super::{
    AttachmentSource, BackendDescriptor, BackendError, ChatBackend, ChatMessage, ChatRequest,
    Completion, MessageRole, Usage, Wire,
};

const ANTHROPIC_VERSION: &str = "2023-06-01";
const DEFAULT_MAX_TOKENS: u32 = 1024;

/// A live provider reached over HTTP.
pub struct HttpBackend {
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: ConcurrencyLimiter,
    bucket: Option<TokenBucket>,
}

enum Attempt {
    Done(Completion),
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        descriptor.validate()?;
        if !matches!(descriptor.wire, Wire::OpenaiChatCompatible | Wire::AnthropicMessagesCompatible) {
            return Err(BackendError::Config(format!("`{}` is not an HTTP wire", descriptor.name)));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(descriptor.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            limiter: ConcurrencyLimiter::new(descriptor.limits.max_in_flight),
            bucket: descriptor.limits.requests_per_minute.map(TokenBucket::per_minute),
            descriptor,
            client,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn api_key(&self) -> Result<String, BackendError> {
        let reference = self.descriptor.credential_ref.as_deref().unwrap_or_default();
        let var = reference.strip_prefix("ENV:").ok_or_else(|| {
            BackendError::Config(format!("credential_ref `{reference}` must look like ENV:NAME"))
        })?;
        std::env::var(var).map_err(|_| BackendError::Auth(format!("environment variable {var} is not set")))
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let model = self.descriptor.model.clone().unwrap_or_default();
        let g = &request.generation;
        let max_tokens = g.max_output_chars.map(|c| c.div_ceil(3) + 16);
        match self.descriptor.wire {
            Wire::AnthropicMessagesCompatible => {
                let (system, rest) = split_system(&request.messages);
                let mut body = json!({
                    "model": model,
                    "max_tokens": max_tokens.unwrap_or(DEFAULT_MAX_TOKENS),
                    "messages": anthropic_messages(rest),
                });
                if !system.is_empty() {
                    body["system"] = Value::String(system);
                }
                if g.deterministic {
                    body["temperature"] = json!(0);
                }
                body
            }
            _ => {
                let messages: Vec<Value> = request.messages.iter().map(openai_message).collect();
                let mut body = json!({ "model": model, "messages": messages });
                if g.deterministic {
                    body["temperature"] = json!(0);
                }
                if let Some(seed) = g.seed {
                    body["seed"] = json!(seed);
                }
                if let Some(m) = max_tokens {
                    body["max_tokens"] = json!(m);
                }
                body
            }
        }
    }

    fn attempt(&self, body: &Value, key: &str) -> Attempt {
        let _permit = self.limiter.acquire();
        if let Some(bucket) = &self.bucket {
            bucket.take();
        }
        let endpoint = self.descriptor.endpoint.as_deref().unwrap_or_default();
        let builder = self.client.post(endpoint).json(body);
        let builder = match self.descriptor.wire {
            Wire::AnthropicMessagesCompatible => builder
                .header("x-api-key", key)
                .header("anthropic-version", ANTHROPIC_VERSION),
            _ => builder.bearer_auth(key),
        };
        let started = Instant::now();
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match self.parse_reply(&text) {
                Ok((reply, usage)) => {
                    Attempt::Done(Completion { text: reply, usage, latency: started.elapsed() })
                }
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(BackendError::Auth(format!("status {status}"))),
            429 => Attempt::Retry(BackendError::RateLimited { attempts: 0 }),
            500..=599 => Attempt::Retry(BackendError::Transport(format!("status {status}: {text}"))),
            _ => Attempt::Fatal(BackendError::Provider { status, body: text }),
        }
    }

    fn parse_reply(&self, text: &str) -> Result<(String, Usage), BackendError> {
        let bad = |what: &str| BackendError::Transport(format!("unexpected response body ({what})"));
        let v: Value = serde_json::from_str(text).map_err(|_| bad("not json"))?;
        match self.descriptor.wire {
            Wire::AnthropicMessagesCompatible => {
                let blocks = v["content"].as_array().ok_or_else(|| bad("no content"))?;
                let reply: String = blocks
                    .iter()
                    .filter(|b| b["type"] == "text")
                    .filter_map(|b| b["text"].as_str())
                    .collect();
                let usage = Usage {
                    input_units: v["usage"]["input_tokens"].as_u64().unwrap_or(0),
                    output_units: v["usage"]["output_tokens"].as_u64().unwrap_or(0),
                };
                Ok((reply, usage))
            }
            _ => {
                let reply = v["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| bad("no choices[0].message.content"))?
                    .to_string();
                let usage = Usage {
                    input_units: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                    output_units: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
                };
                Ok((reply, usage))
            }
        }
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.descriptor.name
    }

    fn multimodal(&self) -> bool {
        self.descriptor.multimodal
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        request.check()?;
        if request.has_attachments() && !self.descriptor.multimodal {
            return Err(BackendError::InvalidRequest(format!(
                "backend `{}` does not accept images",
                self.descriptor.name
            )));
        }
        let key = self.api_key()?;
        let body = self.body(request);
        let max = self.retry.max_attempts.max(1);
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 1..=max {
            if attempt > 1 {
                self.retry.sleep_before(attempt - 1);
            }
            match self.attempt(&body, &key) {
                Attempt::Done(mut c) => {
                    if let Some(limit) = request.generation.max_output_chars {
                        c.text = crate::text::truncate_chars(&c.text, limit as usize).to_string();
                    }
                    return Ok(c);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(match last {
            BackendError::RateLimited { .. } => BackendError::RateLimited { attempts: max },
            other => other,
        })
    }
}

fn split_system(messages: &[ChatMessage]) -> (String, &[ChatMessage]) {
    let n = messages.iter().take_while(|m| m.role == MessageRole::System).count();
    let system = messages[..n].iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n\n");
    (system, &messages[n..])
}

fn data_url(media_type: &str, data: &[u8]) -> String {
    format!("data:{media_type};base64,{}", STANDARD.encode(data))
}

fn openai_message(m: &ChatMessage) -> Value {
    let role = m.role.to_string();
    if m.attachments.is_empty() {
        return json!({ "role": role, "content": m.text });
    }
    let mut parts = vec![json!({ "type": "text", "text": m.text })];
    for a in &m.attachments {
        let url = match &a.source {
            AttachmentSource::Bytes { data } => data_url(&a.media_type, data),
            AttachmentSource::Url { url } => url.clone(),
        };
        parts.push(json!({ "type": "image_url", "image_url": { "url": url } }));
    }
    json!({ "role": role, "content": parts })
}

/// Anthropic-style content blocks. Consecutive messages with the same role
/// are merged because that wire requires alternation.
fn anthropic_messages(messages: &[ChatMessage]) -> Vec<Value> {
    let mut out: Vec<(String, Vec<Value>)> = Vec::new();
    for m in messages {
        let role = match m.role {
            MessageRole::Assistant => "assistant",
            _ => "user",
        };
        let mut blocks = Vec::new();
        for a in &m.attachments {
            let source = match &a.source {
                AttachmentSource::Bytes { data } => json!({
                    "type": "base64", "media_type": a.media_type, "data": STANDARD.encode(data),
                }),
                AttachmentSource::Url { url } => json!({ "type": "url", "url": url }),
            };
            blocks.push(json!({ "type": "image", "source": source }));
        }
        blocks.push(json!({ "type": "text", "text": m.text }));
        match out.last_mut() {
            Some((last_role, content)) if last_role == role => content.extend(blocks),
            _ => out.push((role.to_string(), blocks)),
        }
    }
    out.into_iter().map(|(role, content)| json!({ "role": role, "content": content })).collect()
}
