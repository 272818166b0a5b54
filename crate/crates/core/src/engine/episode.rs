use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::EpisodeConfig;
use crate::backends::{Attachment, AttachmentSource, Usage};
use crate::bias::{RatingParseError, PerceptionScores};
use crate::case::SourceDataset;
use crate::protocol::{Corpus, DoctorAction, MeasurementReply, ProtocolWarning};
use crate::toolbox::{Notebook, ToolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Ungraded,
}

impl Verdict {
    pub fn is_graded(self) -> bool {
        self != Verdict::Ungraded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeReason {
    /// Diagnosis given within the budget.
    Diagnosed,
    /// Diagnosis given after the forced-diagnosis prompt.
    ForcedDiagnosis,
    NoDiagnosis,
    BackendError,
    /// A human session left idle past its timeout.
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Doctor,
    Patient,
    Measurement,
    Research,
    Moderator,
    /// Prompts issued by the harness itself.
    Harness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    DoctorAction,
    Reflection,
    PatientReply,
    MeasurementReply,
    ResearchResult,
    ForcedDiagnosisPrompt,
    ReflectionPrompt,
    ModeratorVerdict,
    Error,
}

/// How an attachment is recorded in a transcript: digest, never bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentRef {
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl From<&Attachment> for AttachmentRef {
    fn from(a: &Attachment) -> Self {
        match &a.source {
            AttachmentSource::Bytes { data } => AttachmentRef {
                media_type: a.media_type.clone(),
                sha256: Some(hex::encode(Sha256::digest(data))),
                url: None,
            },
            AttachmentSource::Url { url } => {
                AttachmentRef { media_type: a.media_type.clone(), sha256: None, url: Some(url.clone()) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub actor: Actor,
    pub kind: TurnKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<DoctorAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementReply>,
    /// Whether this turn used a unit of the budget.
    #[serde(default)]
    pub consumed_budget: bool,
    pub budget_remaining_after: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<AttachmentRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResearchHitRef {
    pub doc_id: String,
    pub title: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResearchEvent {
    pub turn_index: usize,
    pub corpus: Corpus,
    pub query: String,
    pub hits: Vec<ResearchHitRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeWarning {
    pub turn_index: usize,
    #[serde(flatten)]
    pub warning: ProtocolWarning,
}

/// Grouping keys for reports, copied from the case and config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMetadata {
    pub source_dataset: SourceDataset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
    pub language: String,
    /// Backend (model) behind the doctor, or `human`.
    pub doctor_backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default)]
    pub tools: Vec<ToolKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perception {
    pub scores: PerceptionScores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<RatingParseError>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Sentence count of each patient reply.
    pub patient_sentences: Vec<usize>,
    /// Replies of the biased agent that look like refusals (keyword
    /// heuristic, approximate).
    pub bias_refusals: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub by_role: BTreeMap<String, Usage>,
    pub total: Usage,
}

impl UsageTotals {
    pub fn add(&mut self, role: &str, usage: Usage) {
        *self.by_role.entry(role.to_string()).or_default() += usage;
        self.total += usage;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub case_id: String,
    pub config: EpisodeConfig,
    pub metadata: EpisodeMetadata,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub research_events: Vec<ResearchEvent>,
    #[serde(default)]
    pub warnings: Vec<EpisodeWarning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notebook_before: Option<Notebook>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notebook_after: Option<Notebook>,
    pub final_diagnosis: Option<String>,
    pub verdict: Verdict,
    pub outcome_reason: OutcomeReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception: Option<Perception>,
    pub usage: UsageTotals,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("turn {turn}: budget_remaining_after is {found}, expected {expected}")]
    Remaining { turn: usize, expected: u32, found: u32 },
    #[error("turn {turn}: consumed budget with a non-consuming action")]
    FreeActionCharged { turn: usize },
    #[error("turn {turn}: budget charged to a {kind:?} turn")]
    NonDoctorCharged { turn: usize, kind: TurnKind },
    #[error("{used} budget units used, budget is {budget}")]
    OverBudget { used: u32, budget: u32 },
    #[error("turn {turn}: doctor action after the diagnosis")]
    ActionAfterDiagnosis { turn: usize },
    #[error("graded as {verdict:?} without a final diagnosis")]
    GradedWithoutDiagnosis { verdict: Verdict },
}

#[derive(Debug, Error)]
pub enum EpisodeLoadError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
}

impl Episode {
    /// An ungraded episode with no turns, for runs that could not start.
    pub fn failed(config: &EpisodeConfig, case: &crate::case::CaseFile, error: String) -> Self {
        let s = &config.settings;
        Episode {
            episode_id: config.episode_id(),
            case_id: case.id.clone(),
            config: config.clone(),
            metadata: EpisodeMetadata {
                source_dataset: case.metadata.source_dataset,
                specialty: case.metadata.specialty.clone(),
                language: case.metadata.language.clone(),
                doctor_backend: s.doctor.backend.clone(),
                bias: s.doctor.bias.as_ref().or(s.patient.bias.as_ref()).map(|b| b.to_string()),
                tools: s.doctor.tools.iter().copied().collect(),
            },
            turns: Vec::new(),
            research_events: Vec::new(),
            warnings: Vec::new(),
            notebook_before: None,
            notebook_after: None,
            final_diagnosis: None,
            verdict: Verdict::Ungraded,
            outcome_reason: OutcomeReason::BackendError,
            error: Some(error),
            perception: None,
            usage: UsageTotals::default(),
            metrics: EpisodeMetrics::default(),
        }
    }

    /// Budget units used.
    pub fn budget_used(&self) -> u32 {
        self.turns.iter().filter(|t| t.consumed_budget).count() as u32
    }

    /// Checks the budget ledger.
    pub fn validate_ledger(&self) -> Result<(), LedgerError> {
        let budget = self.config.settings.budget;
        let mut remaining = budget;
        let mut diagnosed = false;
        for (i, t) in self.turns.iter().enumerate() {
            if t.consumed_budget {
                if t.kind != TurnKind::DoctorAction {
                    return Err(LedgerError::NonDoctorCharged { turn: i, kind: t.kind });
                }
                if !t.action.as_ref().is_some_and(DoctorAction::consumes_budget) {
                    return Err(LedgerError::FreeActionCharged { turn: i });
                }
                if remaining == 0 {
                    return Err(LedgerError::OverBudget { used: budget + 1, budget });
                }
                remaining -= 1;
            }
            if t.budget_remaining_after != remaining {
                return Err(LedgerError::Remaining {
                    turn: i,
                    expected: remaining,
                    found: t.budget_remaining_after,
                });
            }
            if t.kind == TurnKind::DoctorAction {
                if diagnosed {
                    return Err(LedgerError::ActionAfterDiagnosis { turn: i });
                }
                diagnosed = matches!(t.action, Some(DoctorAction::Diagnose { .. }));
            }
        }
        if self.verdict.is_graded()
            && self.final_diagnosis.is_none()
            && self.outcome_reason != OutcomeReason::NoDiagnosis
        {
            return Err(LedgerError::GradedWithoutDiagnosis { verdict: self.verdict });
        }
        Ok(())
    }

    /// Dialogue as `Speaker: text` lines, excluding harness prompts and
    /// reflections.
    pub fn dialogue_text(&self) -> String {
        dialogue_text(&self.turns)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("episodes serialize");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, EpisodeLoadError> {
        let ep: Episode = serde_json::from_slice(bytes)?;
        ep.validate_ledger()?;
        Ok(ep)
    }

    /// Reads an episode file and re-validates its ledger.
    pub fn load(path: &Path) -> Result<Self, EpisodeLoadError> {
        Self::from_json(&std::fs::read(path)?)
    }
}

pub(crate) fn dialogue_text(turns: &[Turn]) -> String {
    let mut out = String::new();
    for t in turns {
        let speaker = match (t.actor, t.kind) {
            (Actor::Doctor, TurnKind::DoctorAction) => "Doctor",
            (Actor::Patient, _) => "Patient",
            (Actor::Measurement, _) => "Measurement",
            (Actor::Research, _) => "Research",
            _ => continue,
        };
        out.push_str(speaker);
        out.push_str(": ");
        out.push_str(t.text.trim());
        out.push('\n');
    }
    out
}
