//! Bias instructions and the post-episode perception survey.
//!
//! The catalog lives in `data/biases.json` as `kind -> role -> text`, so a new
//! bias is a data change. Cognitive kinds are listed in [`COGNITIVE_KINDS`];
//! every other kind counts as implicit.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Role;
use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::text::fill_template;

pub const COGNITIVE_KINDS: &[&str] =
    &["recency", "frequency", "false_consensus", "self_diagnosis", "status_quo", "confirmation"];

const CATALOG_JSON: &str = include_str!("../data/biases.json");

static BUILTIN: LazyLock<BiasCatalog> =
    LazyLock::new(|| BiasCatalog::from_json(CATALOG_JSON).expect("bundled bias catalog parses"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasCategory {
    Cognitive,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BiasSpec {
    pub role: Role,
    pub kind: String,
}

impl BiasSpec {
    pub fn new(role: Role, kind: impl Into<String>) -> Self {
        BiasSpec { role, kind: kind.into() }
    }

    pub fn category(&self) -> BiasCategory {
        if COGNITIVE_KINDS.contains(&self.kind.as_str()) {
            BiasCategory::Cognitive
        } else {
            BiasCategory::Implicit
        }
    }
}

impl fmt::Display for BiasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.role, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no `{kind}` bias is defined for the {role} role")]
pub struct UnknownBias {
    pub role: Role,
    pub kind: String,
}

#[derive(Debug, Clone, Default)]
pub struct BiasCatalog {
    entries: BTreeMap<String, BTreeMap<Role, String>>,
}

impl BiasCatalog {
    pub fn builtin() -> &'static BiasCatalog {
        &BUILTIN
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(BiasCatalog { entries: serde_json::from_str(json)? })
    }

    pub fn text(&self, spec: &BiasSpec) -> Result<&str, UnknownBias> {
        self.entries
            .get(&spec.kind)
            .and_then(|by_role| by_role.get(&spec.role))
            .map(String::as_str)
            .ok_or_else(|| UnknownBias { role: spec.role, kind: spec.kind.clone() })
    }

    /// Every (role, kind) pair in the catalog.
    pub fn specs(&self) -> Vec<BiasSpec> {
        self.entries
            .iter()
            .flat_map(|(kind, by_role)| by_role.keys().map(|role| BiasSpec::new(*role, kind.clone())))
            .collect()
    }
}

/// The catalog instruction for `spec`, verbatim.
pub fn bias_text(spec: &BiasSpec) -> Result<&'static str, UnknownBias> {
    BiasCatalog::builtin().text(spec)
}

const REFUSAL_MARKERS: &[&str] = &[
    "i cannot",
    "i can't",
    "i won't",
    "i will not",
    "as an ai",
    "not comfortable role-playing",
    "i'm not able to",
    "i am not able to",
    "it would be inappropriate",
    "i must decline",
];

/// Approximate count of replies in which a biased agent refuses its bias
/// instruction. Keyword based; it over- and under-counts.
pub fn count_refusals<'a>(replies: impl IntoIterator<Item = &'a str>) -> usize {
    replies
        .into_iter()
        .filter(|reply| {
            let lower = reply.to_lowercase();
            REFUSAL_MARKERS.iter().any(|m| lower.contains(m))
        })
        .count()
}

// ---------------------------------------------------------------------------
// Perception survey
// ---------------------------------------------------------------------------

/// An integer rating in `1..=10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: u8) -> Option<Self> {
        (1..=10).contains(&value).then_some(Rating(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Rating {
    type Error = String;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Rating::new(value).ok_or_else(|| format!("rating {value} outside 1-10"))
    }
}

impl From<Rating> for u8 {
    fn from(r: Rating) -> u8 {
        r.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyField {
    Confidence,
    Compliance,
    Consultation,
}

impl SurveyField {
    pub const ALL: [SurveyField; 3] =
        [SurveyField::Confidence, SurveyField::Compliance, SurveyField::Consultation];

    pub fn template(self) -> &'static str {
        match self {
            SurveyField::Confidence => include_str!("../templates/survey_confidence.txt"),
            SurveyField::Compliance => include_str!("../templates/survey_compliance.txt"),
            SurveyField::Consultation => include_str!("../templates/survey_consultation.txt"),
        }
    }

    pub fn prompt(self, conversation_history: &str) -> String {
        fill_template(self.template(), &[("conversation_history", conversation_history)])
            .expect("survey templates only use conversation_history")
    }
}

/// Survey answers. A field is `None` when its reply held no rating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionScores {
    pub confidence: Option<Rating>,
    pub compliance: Option<Rating>,
    pub consultation: Option<Rating>,
}

impl PerceptionScores {
    pub fn get(&self, field: SurveyField) -> Option<Rating> {
        match field {
            SurveyField::Confidence => self.confidence,
            SurveyField::Compliance => self.compliance,
            SurveyField::Consultation => self.consultation,
        }
    }

    fn set(&mut self, field: SurveyField, value: Option<Rating>) {
        match field {
            SurveyField::Confidence => self.confidence = value,
            SurveyField::Compliance => self.compliance = value,
            SurveyField::Consultation => self.consultation = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("no 1-10 rating found in {field:?} reply: {reply:?}")]
pub struct RatingParseError {
    pub field: SurveyField,
    pub reply: String,
}

const NUMBER_WORDS: [&str; 10] =
    ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// First standalone integer token in `1..=10`; failing that, the first
/// spelled-out number from one to ten.
pub fn parse_rating(reply: &str) -> Option<Rating> {
    let tokens: Vec<String> = reply
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let numeric = tokens
        .iter()
        .filter(|t| t.chars().all(|c| c.is_ascii_digit()))
        .filter_map(|t| t.parse::<u8>().ok())
        .find_map(Rating::new);
    numeric.or_else(|| {
        tokens.iter().find_map(|t| {
            NUMBER_WORDS.iter().position(|w| w == t).and_then(|i| Rating::new(i as u8 + 1))
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyOutcome {
    pub scores: PerceptionScores,
    pub errors: Vec<RatingParseError>,
}

/// Asks the patient agent the three perception questions, each as a fresh
/// request on top of the patient's system prompt.
pub fn run_perception_survey(
    transcript: &str,
    patient_system_prompt: &str,
    backend: &dyn ChatBackend,
) -> Result<SurveyOutcome, BackendError> {
    let mut scores = PerceptionScores::default();
    let mut errors = Vec::new();
    for field in SurveyField::ALL {
        let request = ChatRequest::new(vec![
            ChatMessage::system(patient_system_prompt),
            ChatMessage::user(field.prompt(transcript)),
        ]);
        let reply = backend.complete(&request)?;
        let rating = parse_rating(&reply.text);
        if rating.is_none() {
            errors.push(RatingParseError { field, reply: reply.text });
        }
        scores.set(field, rating);
    }
    Ok(SurveyOutcome { scores, errors })
}
