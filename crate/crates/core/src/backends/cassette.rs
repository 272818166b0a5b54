use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{canonicalize, request_hash, BackendError, ChatBackend, ChatRequest, Completion, Usage};

/// One line of a cassette file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub canonical_request: String,
    pub response_text: String,
    pub usage: Usage,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Appends cassette entries; writes from concurrent callers are serialized.
pub struct CassetteWriter {
    file: Mutex<File>,
}

impl CassetteWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CassetteWriter { file: Mutex::new(file) })
    }

    pub fn append(&self, entry: &CassetteEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()
    }
}

/// Forwards to an inner backend and records every successful call.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    writer: Arc<CassetteWriter>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, writer: Arc<CassetteWriter>) -> Self {
        RecordingBackend { inner, writer }
    }
}

impl ChatBackend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn multimodal(&self) -> bool {
        self.inner.multimodal()
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let completion = self.inner.complete(request)?;
        let canonical = canonicalize(request);
        let entry = CassetteEntry {
            request_hash: request_hash(request),
            canonical_request: String::from_utf8(canonical).expect("canonical form is utf-8"),
            response_text: completion.text.clone(),
            usage: completion.usage,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        self.writer
            .append(&entry)
            .map_err(|e| BackendError::Transport(format!("cassette write: {e}")))?;
        Ok(completion)
    }
}

/// Serves recorded responses by request hash.
///
/// Identical requests recorded several times are replayed in recording
/// order; once the queue for a hash runs out the last entry keeps being
/// returned.
pub struct ReplayBackend {
    name: String,
    multimodal: bool,
    entries: HashMap<String, Vec<CassetteEntry>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ReplayBackend {
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        let mut map: HashMap<String, Vec<CassetteEntry>> = HashMap::new();
        for e in entries {
            map.entry(e.request_hash.clone()).or_default().push(e);
        }
        ReplayBackend {
            name: name.into(),
            multimodal: false,
            entries: map,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                BackendError::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(name, entries))
    }

    pub fn multimodal(mut self, yes: bool) -> Self {
        self.multimodal = yes;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn multimodal(&self) -> bool {
        self.multimodal
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let hash = request_hash(request);
        let Some(queue) = self.entries.get(&hash) else {
            return Err(BackendError::ReplayMiss { hash });
        };
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(hash).or_insert(0);
        let entry = &queue[(*cursor).min(queue.len() - 1)];
        *cursor += 1;
        Ok(Completion { text: entry.response_text.clone(), usage: entry.usage, latency: Duration::ZERO })
    }
}
