use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use super::{BackendError, ChatBackend, ChatRequest, Completion, Usage};

fn char_usage(request: &ChatRequest, reply: &str) -> Usage {
    Usage { input_units: request.text_chars(), output_units: reply.chars().count() as u64 }
}

/// Returns canned replies in order, then fails with
/// [`BackendError::FixtureExhausted`]. Every request is recorded.
pub struct ScriptedBackend {
    name: String,
    multimodal: bool,
    state: Mutex<ScriptState>,
}

struct ScriptState {
    replies: Vec<String>,
    next: usize,
    seen: Vec<ChatRequest>,
}

impl ScriptedBackend {
    pub fn new<I, S>(name: impl Into<String>, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            name: name.into(),
            multimodal: false,
            state: Mutex::new(ScriptState {
                replies: replies.into_iter().map(Into::into).collect(),
                next: 0,
                seen: Vec::new(),
            }),
        }
    }

    /// Reads a JSON array of reply strings.
    pub fn from_file(name: &str, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let replies: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(name, replies))
    }

    pub fn multimodal(mut self, yes: bool) -> Self {
        self.multimodal = yes;
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().seen.clone()
    }

    pub fn remaining(&self) -> usize {
        let s = self.state.lock().unwrap();
        s.replies.len() - s.next
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn multimodal(&self) -> bool {
        self.multimodal
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        request.check()?;
        let mut s = self.state.lock().unwrap();
        s.seen.push(request.clone());
        let Some(reply) = s.replies.get(s.next).cloned() else {
            return Err(BackendError::FixtureExhausted { backend: self.name.clone() });
        };
        s.next += 1;
        Ok(Completion { usage: char_usage(request, &reply), text: reply, latency: Duration::ZERO })
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Computes each reply from the request. Useful for agents whose answer
/// depends on what they were asked, such as a rule-based moderator.
pub struct FnBackend {
    name: String,
    multimodal: bool,
    reply: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new<F>(name: impl Into<String>, reply: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnBackend { name: name.into(), multimodal: false, reply: Box::new(reply) }
    }

    pub fn multimodal(mut self, yes: bool) -> Self {
        self.multimodal = yes;
        self
    }
}

impl ChatBackend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn multimodal(&self) -> bool {
        self.multimodal
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        request.check()?;
        let text = (self.reply)(request)?;
        Ok(Completion { usage: char_usage(request, &text), text, latency: Duration::ZERO })
    }
}
