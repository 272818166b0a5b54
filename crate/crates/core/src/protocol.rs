//! Doctor command grammar and reply frames.
//!
//! A doctor turn is free text that may contain one of three markers:
//! `Diagnosis Ready: <diagnosis>`, `Request Test: <test>`, or
//! `Research <Internet|Textbooks> <query>`. Markers are case-insensitive,
//! tolerate extra whitespace, and may appear anywhere in the turn. When a
//! turn contains several, precedence is Diagnose > RequestTest > Research;
//! text without a marker is a question for the patient. See `PROTOCOL.md`
//! for the full grammar.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corpus {
    Internet,
    Textbooks,
}

impl Corpus {
    pub fn label(self) -> &'static str {
        match self {
            Corpus::Internet => "internet",
            Corpus::Textbooks => "textbooks",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DoctorAction {
    Ask { text: String },
    RequestTest { test_name: String, raw_text: String },
    Research { corpus: Corpus, query: String },
    Diagnose { diagnosis: String },
}

impl DoctorAction {
    /// Every action except a diagnosis costs one unit of budget.
    pub fn consumes_budget(&self) -> bool {
        !matches!(self, DoctorAction::Diagnose { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ProtocolWarning {
    /// `Research <word>` with a database name that is not recognised.
    ResearchUnknownCorpus { corpus: String },
    /// Markers beyond the one acted on.
    IgnoredMarkers { count: usize },
    /// Moderator reply that is neither Yes nor No.
    MalformedVerdict { reply: String },
    /// Research on a corpus the doctor was not given; treated as a question.
    ResearchUnavailable { corpus: Corpus },
    /// The notebook rewrite after the case failed; the old notebook stays.
    NotebookUpdateFailed { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub action: DoctorAction,
    pub warnings: Vec<ProtocolWarning>,
}

static DIAGNOSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)diagnosis\s+ready\s*:").unwrap());
static REQUEST_TEST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)request\s+test\s*:").unwrap());
static RESEARCH: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bresearch[ \t]+([\p{L}\p{N}_-]+)").unwrap());

/// Classifies a doctor turn. Total: every input yields an action.
pub fn parse_doctor_utterance(text: &str) -> DoctorAction {
    parse_doctor_turn(text).action
}

/// Like [`parse_doctor_utterance`] but also reports protocol warnings.
pub fn parse_doctor_turn(text: &str) -> ParsedTurn {
    let mut warnings = Vec::new();
    let diagnose = DIAGNOSE.find_iter(text).collect::<Vec<_>>();
    let requests = REQUEST_TEST.find_iter(text).collect::<Vec<_>>();
    let mut research = Vec::new();
    for caps in RESEARCH.captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let word = caps.get(1).unwrap();
        match corpus_from_word(word.as_str()) {
            Some(corpus) => research.push((corpus, word.end())),
            None if at_command_position(text, whole.start()) => {
                warnings.push(ProtocolWarning::ResearchUnknownCorpus {
                    corpus: word.as_str().to_string(),
                });
            }
            None => {}
        }
    }

    let total = diagnose.len() + requests.len() + research.len();
    if total > 1 {
        warnings.push(ProtocolWarning::IgnoredMarkers { count: total - 1 });
    }

    let action = if let Some(m) = diagnose.first() {
        let mut diagnosis = marker_argument(&text[m.end()..]);
        if diagnosis.is_empty() {
            diagnosis = text.trim().to_string();
        }
        DoctorAction::Diagnose { diagnosis }
    } else if let Some(m) = requests.first() {
        DoctorAction::RequestTest {
            test_name: marker_argument(&text[m.end()..]),
            raw_text: text.to_string(),
        }
    } else if let Some(&(corpus, end)) = research.first() {
        let rest = text[end..].trim_start_matches([':', ' ', '\t']);
        DoctorAction::Research { corpus, query: marker_argument(rest) }
    } else {
        DoctorAction::Ask { text: text.trim().to_string() }
    };
    ParsedTurn { action, warnings }
}

fn corpus_from_word(word: &str) -> Option<Corpus> {
    match word.to_lowercase().as_str() {
        "internet" | "web" => Some(Corpus::Internet),
        "textbooks" | "textbook" | "books" => Some(Corpus::Textbooks),
        _ => None,
    }
}

/// True when `pos` starts a line, ignoring leading whitespace, quotes and
/// markdown emphasis. Prose uses of "research" elsewhere are not commands.
fn at_command_position(text: &str, pos: usize) -> bool {
    let line_start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    text[line_start..pos]
        .chars()
        .all(|c| c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '`' | '>' | '-'))
}

/// Text after a marker: the rest of its line (or the next non-empty line when
/// the marker ends its line), with wrapping quotes/brackets and trailing
/// punctuation removed.
fn marker_argument(rest: &str) -> String {
    let mut lines = rest.lines();
    let mut arg = lines.next().unwrap_or("").trim();
    if arg.is_empty() {
        arg = lines.map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    }
    strip_wrapping(arg)
}

fn strip_wrapping(arg: &str) -> String {
    let mut s = arg.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(['*', '`']).trim_end_matches(['*', '`']).trim();
        s = s.strip_suffix('.').unwrap_or(s).trim();
        for (open, close) in [('[', ']'), ('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’'), ('(', ')')] {
            if s.len() >= open.len_utf8() + close.len_utf8()
                && s.starts_with(open)
                && s.ends_with(close)
                && balanced_wrap(s, open, close)
            {
                s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            }
        }
        if s == before {
            return s.to_string();
        }
    }
}

/// For bracket pairs, only strip when the opening bracket at index 0 closes
/// at the final character (so `(a) b (c)` keeps its parentheses).
fn balanced_wrap(s: &str, open: char, close: char) -> bool {
    if open == close {
        return true;
    }
    let mut depth = 0i32;
    let last = s.char_indices().last().map(|(i, _)| i).unwrap_or(0);
    for (i, c) in s.char_indices() {
        if c == open {
            depth += 1;
        } else if c == close {
            depth -= 1;
            if depth == 0 && i != last {
                return false;
            }
        }
    }
    depth == 0
}

// ---------------------------------------------------------------------------
// Test-name resolution
// ---------------------------------------------------------------------------

fn fold(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// (name without its parenthetical, contents of the parenthetical), folded.
fn split_parenthetical(s: &str) -> (String, Option<String>) {
    match (s.find('('), s.rfind(')')) {
        (Some(open), Some(close)) if close > open => {
            let base = format!("{} {}", &s[..open], &s[close + 1..]);
            let inner = fold(&s[open + 1..close]);
            (fold(&base), (!inner.is_empty()).then_some(inner))
        }
        _ => (fold(s), None),
    }
}

/// Resolves a requested test against the available section names.
///
/// Tried in order: case-insensitive equality; equality after folding
/// underscores, hyphens and whitespace; equality of the name or its
/// parenthetical abbreviation with a candidate's base name or abbreviation
/// (`cbc` matches `Complete_Blood_Count (CBC)`).
pub fn normalize_test_name<'a, I>(requested: &str, available: I) -> Option<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let available: Vec<&str> = available.into_iter().collect();
    let requested = requested.trim();
    if requested.is_empty() {
        return None;
    }
    if let Some(hit) = available.iter().find(|a| a.to_lowercase() == requested.to_lowercase()) {
        return Some(hit.to_string());
    }
    let folded = fold(requested);
    if let Some(hit) = available.iter().find(|a| fold(a) == folded) {
        return Some(hit.to_string());
    }
    let (req_base, req_abbr) = split_parenthetical(requested);
    let req_forms: Vec<&str> =
        [Some(folded.as_str()), Some(req_base.as_str()), req_abbr.as_deref()]
            .into_iter()
            .flatten()
            .filter(|f| !f.is_empty())
            .collect();
    available
        .iter()
        .find(|a| {
            let (base, abbr) = split_parenthetical(a);
            req_forms
                .iter()
                .any(|f| *f == base || abbr.as_deref() == Some(*f))
        })
        .map(|a| a.to_string())
}

// ---------------------------------------------------------------------------
// Measurement and moderator frames
// ---------------------------------------------------------------------------

pub const NORMAL_READINGS: &str = "Normal Readings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementReply {
    Results { text: String },
    NormalReadings,
}

impl MeasurementReply {
    pub fn render(&self) -> String {
        match self {
            MeasurementReply::Results { text } => format!("Results: {}", text.trim_start()),
            MeasurementReply::NormalReadings => NORMAL_READINGS.to_string(),
        }
    }

    /// Frames arbitrary backend text: a reply that states normal readings
    /// becomes [`MeasurementReply::NormalReadings`], anything else is results
    /// (with a leading `Results:` frame removed so it is not doubled).
    pub fn from_backend_text(text: &str) -> Self {
        let trimmed = text.trim();
        let body = strip_prefix_ci(trimmed, "results:").unwrap_or(trimmed).trim();
        if body.trim_end_matches('.').eq_ignore_ascii_case(NORMAL_READINGS) {
            MeasurementReply::NormalReadings
        } else {
            MeasurementReply::Results { text: body.to_string() }
        }
    }
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Yes,
    No,
}

/// Strict Yes/No parsing of a moderator reply. Only a leading "yes" counts as
/// correct; anything unrecognised grades as No with a warning.
pub fn parse_moderator_verdict(text: &str) -> (Grade, Option<ProtocolWarning>) {
    let first = text
        .split_whitespace()
        .next()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .unwrap_or_default();
    match first.as_str() {
        "yes" => (Grade::Yes, None),
        "no" => (Grade::No, None),
        _ => (
            Grade::No,
            Some(ProtocolWarning::MalformedVerdict { reply: text.trim().to_string() }),
        ),
    }
}
