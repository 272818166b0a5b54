//! Human-doctor sessions on top of the engine's consultation state machine.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use clinsim::backends::{Attachment, AttachmentSource};
use clinsim::engine::{
    Actor, Consultation, DoctorOutcome, EngineError, Episode, EpisodeConfig, EpisodeContext, EpisodeSettings, Indexes,
    MultimodalMode, Phase, TurnError,
};
use clinsim::protocol::{parse_doctor_turn, DoctorAction};
use clinsim::toolbox::ToolKind;
use clinsim::{BackendRegistry, CaseFile, Verdict};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Backend name recorded for human doctors.
pub const HUMAN_BACKEND: &str = "human";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    AwaitingDiagnosis,
    Graded,
    /// Idle past the timeout; persisted ungraded.
    Expired,
    /// A backend failed mid-session; persisted ungraded.
    Failed,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Active => "active",
            SessionState::AwaitingDiagnosis => "awaiting_diagnosis",
            SessionState::Graded => "graded",
            SessionState::Expired => "expired",
            SessionState::Failed => "failed",
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error("persisting session: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub case_id: String,
    #[serde(default)]
    pub budget: Option<u32>,
    /// Research tools for the human doctor (`rag_book`, `rag_web`).
    #[serde(default)]
    pub tools: Vec<ToolKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachmentOut {
    pub media_type: String,
    /// `data:` URL for inline bytes, the original URL otherwise.
    pub url: String,
}

impl From<&Attachment> for AttachmentOut {
    fn from(a: &Attachment) -> Self {
        let url = match &a.source {
            AttachmentSource::Bytes { data } => {
                format!("data:{};base64,{}", a.media_type, base64::engine::general_purpose::STANDARD.encode(data))
            }
            AttachmentSource::Url { url } => url.clone(),
        };
        AttachmentOut { media_type: a.media_type.clone(), url }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub case_id: String,
    pub doctor_view: String,
    pub budget: u32,
    pub budget_remaining: u32,
    pub state: SessionState,
    pub created_at: u64,
    pub expires_at: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<AttachmentOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graded {
    pub verdict: Verdict,
    pub final_diagnosis: String,
    pub correct_diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    /// `patient`, `measurement` or `research`; absent when the message was
    /// a diagnosis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<Actor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub budget_remaining: u32,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<AttachmentOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Graded>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub case_id: String,
    pub state: SessionState,
    pub budget: u32,
    pub budget_remaining: u32,
    pub turns: usize,
    pub created_at: u64,
    pub expires_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Graded>,
}

enum Inner {
    Live(Box<Consultation>),
    Closed { episode: Box<Episode>, state: SessionState, correct: String },
    /// Only seen while a session is being closed.
    Closing,
}

pub struct HumanSession {
    pub id: String,
    inner: Inner,
    created_at: u64,
    last_active: Instant,
    idle_timeout: Duration,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl HumanSession {
    pub fn new(
        id: String,
        config: &EpisodeConfig,
        case: &CaseFile,
        ctx: &EpisodeContext,
        idle_timeout: Duration,
    ) -> Result<Self, SessionError> {
        let consultation = Consultation::new(config, case, ctx)?;
        Ok(HumanSession {
            id,
            inner: Inner::Live(Box::new(consultation)),
            created_at: unix_now(),
            last_active: Instant::now(),
            idle_timeout,
        })
    }

    pub fn state(&self) -> SessionState {
        match &self.inner {
            Inner::Live(c) if c.phase() == Phase::AwaitingDiagnosis => SessionState::AwaitingDiagnosis,
            Inner::Live(_) => SessionState::Active,
            Inner::Closed { state, .. } => *state,
            Inner::Closing => SessionState::Failed,
        }
    }

    fn expires_at(&self) -> u64 {
        let idle = self.last_active.elapsed();
        (unix_now() + self.idle_timeout.as_secs()).saturating_sub(idle.as_secs())
    }

    pub fn is_idle(&self, now: Instant) -> bool {
        matches!(self.inner, Inner::Live(_)) && now.duration_since(self.last_active) >= self.idle_timeout
    }

    fn budget(&self) -> (u32, u32, usize, String) {
        match &self.inner {
            Inner::Live(c) => (c.config().settings.budget, c.remaining(), c.turns().len(), c.case().id.clone()),
            Inner::Closed { episode, .. } => {
                let b = episode.config.settings.budget;
                (b, b - episode.budget_used(), episode.turns.len(), episode.case_id.clone())
            }
            Inner::Closing => (0, 0, 0, String::new()),
        }
    }

    fn result(&self) -> Option<Graded> {
        match &self.inner {
            Inner::Closed { episode, state: SessionState::Graded, correct } => Some(Graded {
                verdict: episode.verdict,
                final_diagnosis: episode.final_diagnosis.clone().unwrap_or_default(),
                correct_diagnosis: correct.clone(),
            }),
            _ => None,
        }
    }

    pub fn created(&self) -> SessionCreated {
        let Inner::Live(c) = &self.inner else { unreachable!("created sessions are live") };
        SessionCreated {
            session_id: self.id.clone(),
            case_id: c.case().id.clone(),
            doctor_view: c.views().doctor.visible_facts.clone(),
            budget: c.config().settings.budget,
            budget_remaining: c.remaining(),
            state: self.state(),
            created_at: self.created_at,
            expires_at: self.expires_at(),
            attachments: match c.config().settings.multimodal_mode {
                MultimodalMode::ImageInitial => c.image().map(AttachmentOut::from).into_iter().collect(),
                _ => Vec::new(),
            },
        }
    }

    pub fn status(&self) -> SessionStatus {
        let (budget, remaining, turns, case_id) = self.budget();
        SessionStatus {
            session_id: self.id.clone(),
            case_id,
            state: self.state(),
            budget,
            budget_remaining: remaining,
            turns,
            created_at: self.created_at,
            expires_at: self.expires_at(),
            result: self.result(),
        }
    }

    fn live(&mut self) -> Result<&mut Consultation, SessionError> {
        match &mut self.inner {
            Inner::Live(c) => Ok(c),
            Inner::Closed { state, .. } => Err(SessionError::Conflict(format!("session is {}", state.as_str()))),
            Inner::Closing => Err(SessionError::Conflict("session is closing".into())),
        }
    }

    /// One doctor message, parsed like an LLM doctor turn.
    pub fn message(&mut self, text: &str, store: &SessionStore) -> Result<MessageReply, SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::Invalid("message text is empty".into()));
        }
        let c = self.live()?;
        if c.would_exceed_budget(text) {
            return Err(SessionError::Conflict(
                "interaction budget exhausted; only a diagnosis is accepted".into(),
            ));
        }
        self.last_active = Instant::now();
        self.apply(text, store)
    }

    /// Submits a diagnosis. Bare text is taken as the diagnosis itself.
    pub fn diagnose(&mut self, text: &str, store: &SessionStore) -> Result<MessageReply, SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::Invalid("diagnosis text is empty".into()));
        }
        self.live()?;
        let utterance = match parse_doctor_turn(text).action {
            DoctorAction::Diagnose { .. } => text.to_string(),
            _ => format!("Diagnosis Ready: {}", text.trim()),
        };
        self.last_active = Instant::now();
        self.apply(&utterance, store)
    }

    fn apply(&mut self, text: &str, store: &SessionStore) -> Result<MessageReply, SessionError> {
        let c = self.live()?;
        match c.doctor_turn(text) {
            Ok(DoctorOutcome::Replied { actor, text, attachments }) => Ok(MessageReply {
                actor: Some(actor),
                text: Some(text),
                budget_remaining: c.remaining(),
                state: self.state(),
                attachments: attachments.iter().map(AttachmentOut::from).collect(),
                result: None,
            }),
            Ok(DoctorOutcome::Diagnosed { .. }) | Ok(DoctorOutcome::NoDiagnosis) => {
                c.grade();
                c.survey();
                let state = if c.verdict().is_graded() { SessionState::Graded } else { SessionState::Failed };
                let remaining = c.remaining();
                self.close(state, store)?;
                if state == SessionState::Failed {
                    return Err(SessionError::Backend("moderator unavailable; session recorded as ungraded".into()));
                }
                Ok(MessageReply {
                    actor: None,
                    text: None,
                    budget_remaining: remaining,
                    state,
                    attachments: Vec::new(),
                    result: self.result(),
                })
            }
            Err(TurnError::BudgetExhausted) => {
                Err(SessionError::Conflict("interaction budget exhausted; only a diagnosis is accepted".into()))
            }
            Err(TurnError::Finished) => Err(SessionError::Conflict("session is over".into())),
            Err(TurnError::Backend(e)) => {
                c.fail(&e);
                self.close(SessionState::Failed, store)?;
                Err(SessionError::Backend(e.to_string()))
            }
        }
    }

    /// Ends an idle session as ungraded.
    pub fn expire(&mut self, store: &SessionStore) -> Result<(), SessionError> {
        if let Inner::Live(c) = &mut self.inner {
            c.expire();
            self.close(SessionState::Expired, store)?;
        }
        Ok(())
    }

    fn close(&mut self, state: SessionState, store: &SessionStore) -> Result<(), SessionError> {
        let Inner::Live(c) = std::mem::replace(&mut self.inner, Inner::Closing) else {
            return Ok(());
        };
        let correct = c.case().correct_diagnosis.clone();
        let mut episode = c.into_episode();
        episode.episode_id = format!("human-{}", self.id);
        let written = store.persist(&episode);
        self.inner = Inner::Closed { episode: Box::new(episode), state, correct };
        Ok(written?)
    }
}

/// Shared engine resources and where finished sessions are written.
pub struct SessionStore {
    pub cases: HashMap<String, CaseFile>,
    pub settings: EpisodeSettings,
    pub registry: BackendRegistry,
    pub indexes: Indexes,
    pub media_dir: PathBuf,
    pub dir: PathBuf,
    pub idle_timeout: Duration,
    sessions: Mutex<HashMap<String, Arc<Mutex<HumanSession>>>>,
}

impl SessionStore {
    pub fn new(
        cases: Vec<CaseFile>,
        settings: EpisodeSettings,
        registry: BackendRegistry,
        indexes: Indexes,
        media_dir: PathBuf,
        dir: PathBuf,
        idle_timeout: Duration,
    ) -> Self {
        SessionStore {
            cases: cases.into_iter().map(|c| (c.id.clone(), c)).collect(),
            settings,
            registry,
            indexes,
            media_dir,
            dir,
            idle_timeout,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn create(&self, req: &CreateSession) -> Result<Arc<Mutex<HumanSession>>, SessionError> {
        let case = self.cases.get(&req.case_id).ok_or_else(|| SessionError::UnknownCase(req.case_id.clone()))?;
        let mut settings = self.settings.clone();
        settings.doctor.backend = HUMAN_BACKEND.into();
        settings.doctor.bias = None;
        settings.doctor.tools = req.tools.iter().copied().collect();
        if settings.doctor.tools.iter().any(|t| t.corpus().is_none()) {
            return Err(SessionError::Invalid("only research tools (rag_book, rag_web) apply to human doctors".into()));
        }
        if let Some(b) = req.budget {
            if b == 0 {
                return Err(SessionError::Invalid("budget must be at least 1".into()));
            }
            settings.budget = b;
        }
        let config = EpisodeConfig::new(&case.id, settings);
        let mut ctx = EpisodeContext::new(&self.registry, &self.indexes);
        ctx.media_dir = Some(&self.media_dir);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = HumanSession::new(id.clone(), &config, case, &ctx, self.idle_timeout).map_err(|e| match e {
            SessionError::Engine(EngineError::Config(c)) => SessionError::Invalid(c.to_string()),
            SessionError::Engine(EngineError::MissingCorpus(c)) => {
                SessionError::Invalid(format!("no {c} corpus is configured on this server"))
            }
            other => other,
        })?;
        let slot = Arc::new(Mutex::new(session));
        self.sessions.lock().unwrap().insert(id, slot.clone());
        Ok(slot)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<HumanSession>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    /// Expires idle live sessions. Returns how many were expired.
    pub fn sweep(&self) -> usize {
        let now = Instant::now();
        let all: Vec<_> = self.sessions.lock().unwrap().values().cloned().collect();
        let mut n = 0;
        for slot in all {
            let mut s = slot.lock().unwrap();
            if s.is_idle(now) && s.expire(self).is_ok() {
                n += 1;
            }
        }
        n
    }

    /// Writes a finished session as an episode file.
    pub fn persist(&self, episode: &Episode) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(format!("{}.json", episode.episode_id));
        write_atomic(&path, episode.to_json().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
