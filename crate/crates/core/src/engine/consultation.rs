//! The turn-level state machine shared by LLM and human doctors.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::config::{ConfigError, EpisodeConfig, MeasurementMode, MultimodalMode};
use super::episode::{
    dialogue_text, Actor, AttachmentRef, Episode, EpisodeMetadata, EpisodeMetrics, EpisodeWarning,
    OutcomeReason, Perception, ResearchEvent, ResearchHitRef, Turn, TurnKind, UsageTotals, Verdict,
};
use crate::agents::{
    build_doctor_prompt, build_measurement_prompt, build_patient_prompt, measurement_reply,
    moderator_request, PromptBundle,
};
use crate::backends::{
    Attachment, BackendError, BackendRegistry, ChatBackend, ChatMessage, ChatRequest, Completion,
    Generation,
};
use crate::bias::{count_refusals, run_perception_survey};
use crate::case::{partition, CaseFile, RoleViews};
use crate::protocol::{
    parse_doctor_turn, parse_moderator_verdict, Corpus, DoctorAction, Grade, MeasurementReply,
    ProtocolWarning,
};
use crate::text::{sentence_count, truncate_chars};
use crate::toolbox::{research_corpus, Notebook, RetrievalIndex, ToolKind, REFLECTION_PROMPT};

pub const OPENING_PROMPT: &str = include_str!("../../templates/opening.txt");
pub const CONTINUE_PROMPT: &str = include_str!("../../templates/continue.txt");
pub const FORCED_DIAGNOSIS_PROMPT: &str = include_str!("../../templates/forced_diagnosis.txt");

/// Retrieval indexes by corpus.
pub type Indexes = BTreeMap<Corpus, Arc<RetrievalIndex>>;

/// Shared resources an episode draws on.
#[derive(Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub registry: &'a BackendRegistry,
    pub indexes: &'a Indexes,
    /// Notebook carried in from earlier cases.
    pub notebook: Option<&'a Notebook>,
    /// Directory that relative case image paths resolve against.
    pub media_dir: Option<&'a Path>,
}

impl<'a> EpisodeContext<'a> {
    pub fn new(registry: &'a BackendRegistry, indexes: &'a Indexes) -> Self {
        EpisodeContext { registry, indexes, notebook: None, media_dir: None }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("config is for case `{config}` but case `{case}` was given")]
    CaseMismatch { config: String, case: String },
    #[error("no {0} corpus is loaded but the doctor has the matching research tool")]
    MissingCorpus(&'static str),
    #[error("case image: {0}")]
    Media(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Active,
    /// Budget spent; only a diagnosis is accepted.
    AwaitingDiagnosis,
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DoctorOutcome {
    Replied { actor: Actor, text: String, attachments: Vec<Attachment> },
    Diagnosed { diagnosis: String },
    /// The forced-diagnosis reply held no diagnosis.
    NoDiagnosis,
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("the consultation is over")]
    Finished,
    #[error("interaction budget exhausted; only a diagnosis is accepted")]
    BudgetExhausted,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Counts usage of every call it forwards.
pub(crate) struct Metered {
    inner: Arc<dyn ChatBackend>,
    role: &'static str,
    totals: Arc<Mutex<UsageTotals>>,
}

impl ChatBackend for Metered {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn multimodal(&self) -> bool {
        self.inner.multimodal()
    }
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let c = self.inner.complete(request)?;
        self.totals.lock().unwrap().add(self.role, c.usage);
        Ok(c)
    }
}

/// A message fragment for the doctor. `committed` replaces `live` in the
/// history once the doctor has answered it.
struct Fragment {
    live: String,
    committed: String,
}

impl Fragment {
    fn same(text: impl Into<String>) -> Self {
        let text = text.into();
        Fragment { committed: text.clone(), live: text }
    }
}

pub struct Consultation {
    config: EpisodeConfig,
    case: CaseFile,
    views: RoleViews,
    doctor_backend: String,
    patient: Arc<dyn ChatBackend>,
    measurement: Arc<dyn ChatBackend>,
    moderator: Arc<dyn ChatBackend>,
    usage: Arc<Mutex<UsageTotals>>,
    generation: Generation,
    index: Option<Arc<RetrievalIndex>>,
    research: Option<Corpus>,
    notebook: Option<Notebook>,
    image: Option<Attachment>,
    patient_prompt: PromptBundle,
    measurement_prompt: PromptBundle,

    remaining: u32,
    phase: Phase,
    forced: bool,
    turns: Vec<Turn>,
    research_events: Vec<ResearchEvent>,
    warnings: Vec<EpisodeWarning>,
    doctor_history: Vec<ChatMessage>,
    pending: Vec<Fragment>,
    pending_attachments: Vec<Attachment>,
    patient_history: Vec<ChatMessage>,
    patient_pending: Vec<String>,
    final_diagnosis: Option<String>,
    verdict: Verdict,
    outcome: Option<OutcomeReason>,
    error: Option<String>,
    perception: Option<Perception>,
}

impl Metered {
    pub(crate) fn new(inner: Arc<dyn ChatBackend>, role: &'static str, totals: Arc<Mutex<UsageTotals>>) -> Self {
        Metered { inner, role, totals }
    }
}

fn metered(
    registry: &BackendRegistry,
    name: &str,
    role: &'static str,
    totals: &Arc<Mutex<UsageTotals>>,
) -> Result<Arc<dyn ChatBackend>, BackendError> {
    Ok(Arc::new(Metered { inner: registry.get(name)?, role, totals: totals.clone() }))
}

fn is_image_request(name: &str) -> bool {
    let lower = name.to_lowercase();
    ["image", "photo", "picture"].iter().any(|w| lower.contains(w))
}

impl Consultation {
    pub fn new(config: &EpisodeConfig, case: &CaseFile, ctx: &EpisodeContext) -> Result<Self, EngineError> {
        if config.case_id != case.id {
            return Err(EngineError::CaseMismatch { config: config.case_id.clone(), case: case.id.clone() });
        }
        let s = &config.settings;
        s.validate_for(case)?;
        let usage = Arc::new(Mutex::new(UsageTotals::default()));
        let patient = metered(ctx.registry, &s.patient.backend, "patient", &usage)?;
        let measurement = metered(ctx.registry, &s.measurement.backend, "measurement", &usage)?;
        let moderator = metered(ctx.registry, &s.moderator.backend, "moderator", &usage)?;

        let research = research_corpus(&s.doctor.tools);
        let index = match research {
            Some(corpus) => Some(
                ctx.indexes.get(&corpus).cloned().ok_or(EngineError::MissingCorpus(corpus.label()))?,
            ),
            None => None,
        };
        let notebook = s
            .doctor
            .tools
            .contains(&ToolKind::Notebook)
            .then(|| ctx.notebook.cloned().unwrap_or_default());
        let image = match (&case.metadata.image_ref, s.multimodal_mode) {
            (Some(media), mode) if mode != MultimodalMode::None => Some(
                Attachment::load(&media.uri, &media.media_type, ctx.media_dir.unwrap_or(Path::new(".")))
                    .map_err(|e| EngineError::Media(format!("{}: {e}", media.uri)))?,
            ),
            _ => None,
        };

        let views = partition(case);
        let patient_prompt = build_patient_prompt(&views.patient, &s.patient.language, s.patient.bias.as_ref())
            .expect("bias validated with the config");
        let measurement_prompt = build_measurement_prompt(&views.measurement, &s.measurement.language);
        let generation = Generation {
            max_output_chars: None,
            deterministic: s.options.deterministic,
            seed: s.seed,
        };
        let pending_attachments = match (s.multimodal_mode, &image) {
            (MultimodalMode::ImageInitial, Some(img)) => vec![img.clone()],
            _ => Vec::new(),
        };
        Ok(Consultation {
            config: config.clone(),
            case: case.clone(),
            views,
            doctor_backend: s.doctor.backend.clone(),
            patient,
            measurement,
            moderator,
            usage,
            generation,
            index,
            research,
            notebook,
            image,
            patient_prompt,
            measurement_prompt,
            remaining: s.budget,
            phase: Phase::Active,
            forced: false,
            turns: Vec::new(),
            research_events: Vec::new(),
            warnings: Vec::new(),
            doctor_history: Vec::new(),
            pending: vec![Fragment::same(OPENING_PROMPT)],
            pending_attachments,
            patient_history: Vec::new(),
            patient_pending: Vec::new(),
            final_diagnosis: None,
            verdict: Verdict::Ungraded,
            outcome: None,
            error: None,
            perception: None,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn case(&self) -> &CaseFile {
        &self.case
    }

    pub fn views(&self) -> &RoleViews {
        &self.views
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn forced(&self) -> bool {
        self.forced
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn final_diagnosis(&self) -> Option<&str> {
        self.final_diagnosis.as_deref()
    }

    pub fn image(&self) -> Option<&Attachment> {
        self.image.as_ref()
    }

    /// Adds usage from calls made outside the consultation (the doctor).
    pub fn add_usage(&self, role: &str, usage: crate::backends::Usage) {
        self.usage.lock().unwrap().add(role, usage);
    }

    fn doctor_prompt(&self) -> PromptBundle {
        let s = &self.config.settings;
        build_doctor_prompt(
            &self.views.doctor,
            s.budget,
            s.budget - self.remaining,
            &s.doctor.tools,
            &s.doctor.language,
            s.doctor.bias.as_ref(),
            self.notebook.as_ref(),
        )
        .expect("bias validated with the config")
    }

    fn doctor_request_with(&self, extra: Option<&str>) -> ChatRequest {
        let mut bundle = self.doctor_prompt();
        bundle.turn_context = self.doctor_history.clone();
        let mut live: Vec<&str> = self.pending.iter().map(|f| f.live.as_str()).collect();
        live.extend(extra);
        bundle
            .turn_context
            .push(ChatMessage::user(live.join("\n\n")).with_attachments(self.pending_attachments.clone()));
        bundle.to_request().with_generation(self.generation.clone())
    }

    /// The request for the doctor's next turn. It always ends with a user
    /// message holding everything the doctor has not yet answered.
    pub fn doctor_request(&self) -> ChatRequest {
        self.doctor_request_with(None)
    }

    /// The request for a reflection turn.
    pub fn reflection_request(&self) -> ChatRequest {
        self.doctor_request_with(Some(REFLECTION_PROMPT))
    }

    fn commit_pending(&mut self, extra: Option<&str>) {
        let mut committed: Vec<String> = self.pending.drain(..).map(|f| f.committed).collect();
        committed.extend(extra.map(str::to_string));
        let attachments = std::mem::take(&mut self.pending_attachments);
        self.doctor_history.push(ChatMessage::user(committed.join("\n\n")).with_attachments(attachments));
    }

    fn push_turn(&mut self, actor: Actor, kind: TurnKind, text: impl Into<String>) -> usize {
        self.turns.push(Turn {
            actor,
            kind,
            text: text.into(),
            action: None,
            measurement: None,
            consumed_budget: false,
            budget_remaining_after: self.remaining,
            attachments: Vec::new(),
        });
        self.turns.len() - 1
    }

    /// Records a reflection produced from [`Self::reflection_request`].
    pub fn record_reflection(&mut self, text: &str) {
        self.commit_pending(Some(REFLECTION_PROMPT));
        self.doctor_history.push(ChatMessage::assistant(text));
        self.push_turn(Actor::Harness, TurnKind::ReflectionPrompt, REFLECTION_PROMPT);
        self.push_turn(Actor::Doctor, TurnKind::Reflection, text);
        self.pending.push(Fragment::same(CONTINUE_PROMPT));
    }

    /// Appends the forced-diagnosis prompt. Only valid once the budget is
    /// spent.
    pub fn force_diagnosis(&mut self) {
        debug_assert_eq!(self.phase, Phase::AwaitingDiagnosis);
        self.forced = true;
        self.push_turn(Actor::Harness, TurnKind::ForcedDiagnosisPrompt, FORCED_DIAGNOSIS_PROMPT);
        self.pending.push(Fragment::same(FORCED_DIAGNOSIS_PROMPT));
    }

    /// True when `text` would be refused because the budget is spent and it
    /// is not a diagnosis.
    pub fn would_exceed_budget(&self, text: &str) -> bool {
        self.phase == Phase::AwaitingDiagnosis
            && !matches!(parse_doctor_turn(text).action, DoctorAction::Diagnose { .. })
    }

    /// Applies one doctor turn.
    pub fn doctor_turn(&mut self, text: &str) -> Result<DoctorOutcome, TurnError> {
        if self.phase == Phase::Finished {
            return Err(TurnError::Finished);
        }
        let parsed = parse_doctor_turn(text);
        let is_diagnosis = matches!(parsed.action, DoctorAction::Diagnose { .. });
        if self.phase == Phase::AwaitingDiagnosis && !is_diagnosis && !self.forced {
            return Err(TurnError::BudgetExhausted);
        }

        self.commit_pending(None);
        self.doctor_history.push(ChatMessage::assistant(text));
        let consume = self.phase == Phase::Active && parsed.action.consumes_budget();
        if consume {
            self.remaining -= 1;
        }
        let index = self.push_turn(Actor::Doctor, TurnKind::DoctorAction, text);
        self.turns[index].action = Some(parsed.action.clone());
        self.turns[index].consumed_budget = consume;
        for warning in parsed.warnings {
            self.warnings.push(EpisodeWarning { turn_index: index, warning });
        }

        if let DoctorAction::Diagnose { diagnosis } = parsed.action {
            self.final_diagnosis = Some(diagnosis.clone());
            self.outcome = Some(if self.forced { OutcomeReason::ForcedDiagnosis } else { OutcomeReason::Diagnosed });
            self.phase = Phase::Finished;
            return Ok(DoctorOutcome::Diagnosed { diagnosis });
        }
        if !consume {
            // reply to the forced prompt without a diagnosis
            self.give_up();
            return Ok(DoctorOutcome::NoDiagnosis);
        }

        let outcome = self.route(index, parsed.action, text)?;
        if self.remaining == 0 {
            self.phase = Phase::AwaitingDiagnosis;
        }
        Ok(outcome)
    }

    fn route(&mut self, index: usize, action: DoctorAction, raw: &str) -> Result<DoctorOutcome, TurnError> {
        match action {
            DoctorAction::Ask { text } => self.ask_patient(&text),
            DoctorAction::RequestTest { test_name, raw_text } => self.measure(&test_name, &raw_text),
            DoctorAction::Research { corpus, query } if self.research == Some(corpus) => {
                Ok(self.research(index, corpus, &query))
            }
            DoctorAction::Research { corpus, .. } => {
                self.warnings.push(EpisodeWarning {
                    turn_index: index,
                    warning: ProtocolWarning::ResearchUnavailable { corpus },
                });
                self.ask_patient(raw.trim())
            }
            DoctorAction::Diagnose { .. } => unreachable!("handled by the caller"),
        }
    }

    fn ask_patient(&mut self, question: &str) -> Result<DoctorOutcome, TurnError> {
        let mut parts = std::mem::take(&mut self.patient_pending);
        parts.push(question.to_string());
        self.patient_history.push(ChatMessage::user(parts.join("\n\n")));
        let mut bundle = self.patient_prompt.clone();
        bundle.turn_context = self.patient_history.clone();
        let request = bundle.to_request().with_generation(self.generation.clone());
        let reply = self.patient.complete(&request)?.text;
        self.patient_history.push(ChatMessage::assistant(reply.clone()));
        self.push_turn(Actor::Patient, TurnKind::PatientReply, reply.clone());
        self.pending.push(Fragment::same(reply.clone()));
        Ok(DoctorOutcome::Replied { actor: Actor::Patient, text: reply, attachments: Vec::new() })
    }

    fn measure(&mut self, test_name: &str, raw: &str) -> Result<DoctorOutcome, TurnError> {
        let mut reply = match self.config.settings.options.measurement_mode {
            MeasurementMode::Template => measurement_reply(&self.case, test_name),
            MeasurementMode::Backend => {
                let mut bundle = self.measurement_prompt.clone();
                bundle.turn_context.push(ChatMessage::user(raw));
                let request = bundle.to_request().with_generation(self.generation.clone());
                MeasurementReply::from_backend_text(&self.measurement.complete(&request)?.text)
            }
        };
        let mut attachments = Vec::new();
        if self.config.settings.multimodal_mode == MultimodalMode::ImageOnRequest && is_image_request(test_name) {
            if let Some(img) = &self.image {
                attachments.push(img.clone());
                if reply == MeasurementReply::NormalReadings {
                    reply = MeasurementReply::Results { text: "Image attached.".into() };
                }
            }
        }
        let text = reply.render();
        let index = self.push_turn(Actor::Measurement, TurnKind::MeasurementReply, text.clone());
        self.turns[index].measurement = Some(reply);
        self.turns[index].attachments = attachments.iter().map(AttachmentRef::from).collect();
        self.pending.push(Fragment::same(text.clone()));
        self.pending_attachments.extend(attachments.iter().cloned());
        if self.config.settings.options.patient_sees_measurements {
            self.patient_pending.push(format!("The doctor shared a test result with you: {text}"));
        }
        Ok(DoctorOutcome::Replied { actor: Actor::Measurement, text, attachments })
    }

    fn research(&mut self, doctor_turn: usize, corpus: Corpus, query: &str) -> DoctorOutcome {
        let opts = self.config.settings.options.research.clone();
        let index = self.index.clone().expect("research corpus implies an index");
        let hits = index.retrieve(query, opts.k).unwrap_or_default();
        let mut text = format!("Research results from {} for \"{query}\":", corpus.label());
        if hits.is_empty() {
            text.push_str("\nNo documents found.");
        }
        for (i, h) in hits.iter().enumerate() {
            let body = truncate_chars(&h.body, opts.passage_chars);
            text.push_str(&format!("\n\n[{}] {} ({})\n{}", i + 1, h.title, h.doc_id, body));
        }
        self.research_events.push(ResearchEvent {
            turn_index: doctor_turn,
            corpus,
            query: query.to_string(),
            hits: hits
                .iter()
                .map(|h| ResearchHitRef { doc_id: h.doc_id.clone(), title: h.title.clone(), score: h.score })
                .collect(),
        });
        self.push_turn(Actor::Research, TurnKind::ResearchResult, text.clone());
        let committed = if opts.persist_in_context {
            text.clone()
        } else {
            format!("Research results from {} for \"{query}\" were shown earlier.", corpus.label())
        };
        self.pending.push(Fragment { live: text.clone(), committed });
        DoctorOutcome::Replied { actor: Actor::Research, text, attachments: Vec::new() }
    }

    /// Ends the episode as ungraded after a backend failure.
    pub fn fail(&mut self, err: &BackendError) {
        self.push_turn(Actor::Harness, TurnKind::Error, err.to_string());
        self.error = Some(err.to_string());
        self.verdict = Verdict::Ungraded;
        self.outcome = Some(OutcomeReason::BackendError);
        self.phase = Phase::Finished;
    }

    /// Ends the episode without a diagnosis, graded No.
    pub fn give_up(&mut self) {
        self.verdict = Verdict::No;
        self.outcome = Some(OutcomeReason::NoDiagnosis);
        self.phase = Phase::Finished;
    }

    /// Ends a human session that went idle.
    pub fn expire(&mut self) {
        self.verdict = Verdict::Ungraded;
        self.outcome = Some(OutcomeReason::Expired);
        self.phase = Phase::Finished;
    }

    /// Asks the moderator about the final diagnosis, if there is one and it
    /// has not been graded yet.
    pub fn grade(&mut self) -> Verdict {
        if self.final_diagnosis.is_none() {
            return self.verdict;
        }
        if self.verdict.is_graded() || self.outcome == Some(OutcomeReason::BackendError) {
            return self.verdict;
        }
        // the moderator sees the doctor's whole diagnosing utterance
        let utterance = self
            .turns
            .iter()
            .rev()
            .find(|t| t.kind == TurnKind::DoctorAction)
            .map(|t| t.text.trim().to_string())
            .unwrap_or_default();
        let request = moderator_request(&self.case.correct_diagnosis, &utterance)
            .with_generation(self.generation.clone());
        match self.moderator.complete(&request) {
            Ok(reply) => {
                let (grade, warning) = parse_moderator_verdict(&reply.text);
                let index = self.push_turn(Actor::Moderator, TurnKind::ModeratorVerdict, reply.text);
                if let Some(warning) = warning {
                    self.warnings.push(EpisodeWarning { turn_index: index, warning });
                }
                self.verdict = match grade {
                    Grade::Yes => Verdict::Yes,
                    Grade::No => Verdict::No,
                };
            }
            Err(e) => self.fail(&e),
        }
        self.verdict
    }

    /// Runs the patient perception survey when enabled and a diagnosis was
    /// delivered.
    pub fn survey(&mut self) {
        if !self.config.settings.options.perception_survey
            || self.final_diagnosis.is_none()
            || !self.verdict.is_graded()
        {
            return;
        }
        let transcript = dialogue_text(&self.turns);
        match run_perception_survey(&transcript, &self.patient_prompt.system_text, self.patient.as_ref()) {
            Ok(outcome) => {
                self.perception = Some(Perception { scores: outcome.scores, errors: outcome.errors })
            }
            Err(e) => self.error = Some(format!("perception survey: {e}")),
        }
    }

    pub fn into_episode(self) -> Episode {
        let s = &self.config.settings;
        let patient_replies: Vec<&str> = self
            .turns
            .iter()
            .filter(|t| t.kind == TurnKind::PatientReply)
            .map(|t| t.text.as_str())
            .collect();
        let patient_sentences = patient_replies.iter().map(|r| sentence_count(r)).collect();
        let bias_refusals = match (&s.doctor.bias, &s.patient.bias) {
            (Some(_), _) => count_refusals(
                self.turns.iter().filter(|t| t.actor == Actor::Doctor).map(|t| t.text.as_str()),
            ),
            (None, Some(_)) => count_refusals(patient_replies.iter().copied()),
            (None, None) => 0,
        };
        let bias = s.doctor.bias.as_ref().or(s.patient.bias.as_ref()).map(|b| b.to_string());
        let metadata = EpisodeMetadata {
            source_dataset: self.case.metadata.source_dataset,
            specialty: self.case.metadata.specialty.clone(),
            language: self.case.metadata.language.clone(),
            doctor_backend: self.doctor_backend.clone(),
            bias,
            tools: s.doctor.tools.iter().copied().collect(),
        };
        let usage = self.usage.lock().unwrap().clone();
        Episode {
            episode_id: self.config.episode_id(),
            case_id: self.case.id.clone(),
            metadata,
            turns: self.turns,
            research_events: self.research_events,
            warnings: self.warnings,
            notebook_before: self.notebook.clone(),
            notebook_after: self.notebook,
            final_diagnosis: self.final_diagnosis,
            verdict: self.verdict,
            outcome_reason: self.outcome.unwrap_or(OutcomeReason::NoDiagnosis),
            error: self.error,
            perception: self.perception,
            usage,
            metrics: EpisodeMetrics {
                patient_sentences,
                bias_refusals,
            },
            config: self.config,
        }
    }
}
