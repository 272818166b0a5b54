use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::engine::{Episode, Verdict};
use crate::protocol::{parse_moderator_verdict, Grade};
use crate::text::fill_template;

const SYSTEM: &str = include_str!("../../templates/coverage_system.txt");
const USER: &str = include_str!("../../templates/coverage_user.txt");

/// Human-authored relevant facts for a case. One JSON object per line in
/// annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSet {
    pub case_id: String,
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageAnnotation {
    pub case_id: String,
    pub relevant_facts: Vec<String>,
    pub extracted_flags: Vec<bool>,
    /// Indexes of flags set by a human override.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overridden: Vec<usize>,
}

/// A human correction to one automated flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageOverride {
    pub case_id: String,
    pub fact_index: usize,
    pub extracted: bool,
}

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("case `{0}` has no relevant facts")]
    NoFacts(String),
    #[error("case `{case_id}`: {facts} facts but {flags} flags")]
    LengthMismatch { case_id: String, facts: usize, flags: usize },
    #[error("override for case `{case_id}` names fact {index}, which does not exist")]
    BadOverride { case_id: String, index: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Share of relevant facts the doctor extracted.
pub fn coverage_ratio(a: &CoverageAnnotation) -> Result<f64, CoverageError> {
    if a.relevant_facts.is_empty() {
        return Err(CoverageError::NoFacts(a.case_id.clone()));
    }
    if a.relevant_facts.len() != a.extracted_flags.len() {
        return Err(CoverageError::LengthMismatch {
            case_id: a.case_id.clone(),
            facts: a.relevant_facts.len(),
            flags: a.extracted_flags.len(),
        });
    }
    Ok(a.extracted_flags.iter().filter(|&&f| f).count() as f64 / a.extracted_flags.len() as f64)
}

/// Reads a JSON-Lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CoverageError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CoverageError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn coverage_request(dialogue: &str, fact: &str) -> ChatRequest {
    let user = fill_template(USER, &[("dialogue", dialogue), ("fact", fact)]).expect("coverage template placeholders");
    ChatRequest::new(vec![ChatMessage::system(SYSTEM), ChatMessage::user(user)])
}

/// Flags each fact with a moderator-style Yes/No call over the dialogue.
pub fn match_facts(dialogue: &str, facts: &[String], backend: &dyn ChatBackend) -> Result<Vec<bool>, BackendError> {
    facts
        .iter()
        .map(|fact| {
            let reply = backend.complete(&coverage_request(dialogue, fact))?;
            Ok(parse_moderator_verdict(&reply.text).0 == Grade::Yes)
        })
        .collect()
}

/// Applies the overrides that concern `a.case_id`.
pub fn apply_overrides(a: &mut CoverageAnnotation, overrides: &[CoverageOverride]) -> Result<(), CoverageError> {
    for o in overrides.iter().filter(|o| o.case_id == a.case_id) {
        let flag = a
            .extracted_flags
            .get_mut(o.fact_index)
            .ok_or_else(|| CoverageError::BadOverride { case_id: o.case_id.clone(), index: o.fact_index })?;
        *flag = o.extracted;
        if !a.overridden.contains(&o.fact_index) {
            a.overridden.push(o.fact_index);
        }
    }
    a.overridden.sort_unstable();
    Ok(())
}

/// Automated annotation of one episode, then human overrides.
pub fn annotate(
    episode: &Episode,
    facts: &FactSet,
    backend: &dyn ChatBackend,
    overrides: &[CoverageOverride],
) -> Result<CoverageAnnotation, CoverageError> {
    if facts.facts.is_empty() {
        return Err(CoverageError::NoFacts(facts.case_id.clone()));
    }
    let flags = match_facts(&episode.dialogue_text(), &facts.facts, backend)
        .map_err(|e| CoverageError::Io(std::io::Error::other(e.to_string())))?;
    let mut a = CoverageAnnotation {
        case_id: facts.case_id.clone(),
        relevant_facts: facts.facts.clone(),
        extracted_flags: flags,
        overridden: Vec::new(),
    };
    apply_overrides(&mut a, overrides)?;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub n: usize,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_correct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_incorrect: Option<f64>,
}

/// Mean coverage, overall and split by verdict.
pub fn summarize_coverage(items: &[(CoverageAnnotation, Verdict)]) -> Result<CoverageSummary, CoverageError> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (a, v) in items {
        let r = coverage_ratio(a)?;
        all.push(r);
        match v {
            Verdict::Yes => by.entry("yes").or_default().push(r),
            Verdict::No => by.entry("no").or_default().push(r),
            Verdict::Ungraded => {}
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if all.is_empty() {
        return Err(CoverageError::NoFacts("(no annotations)".into()));
    }
    Ok(CoverageSummary {
        n: all.len(),
        mean: mean(&all),
        mean_correct: by.get("yes").map(|v| mean(v)),
        mean_incorrect: by.get("no").map(|v| mean(v)),
    })
}
