#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use clinsim::backends::{ChatBackend, ChatRequest, FnBackend, MessageRole, ScriptedBackend};
use clinsim::case::{load_case_set, parse_case};
use clinsim::engine::{EpisodeContext, Indexes};
use clinsim::{BackendRegistry, CaseFile};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn cases_dir() -> PathBuf {
    fixtures().join("cases")
}

pub fn case(id: &str) -> CaseFile {
    parse_case(&std::fs::read(cases_dir().join(format!("{id}.json"))).unwrap()).unwrap()
}

pub fn all_cases() -> Vec<CaseFile> {
    load_case_set(&cases_dir()).unwrap()
}

pub fn scripted(name: &str, replies: &[&str]) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(name, replies.iter().copied()))
}

/// Text of the last user message of a request.
pub fn last_user(req: &ChatRequest) -> &str {
    req.messages.iter().rev().find(|m| m.role == MessageRole::User).map(|m| m.text.as_str()).unwrap_or("")
}

/// Moderator that answers Yes when the doctor's utterance contains the
/// correct diagnosis (case-insensitive).
pub fn fair_moderator() -> Arc<FnBackend> {
    Arc::new(FnBackend::new("moderator", |req: &ChatRequest| {
        let user = last_user(req);
        let correct = user
            .split("Here is the correct diagnosis: ")
            .nth(1)
            .and_then(|s| s.lines().next())
            .unwrap_or_default()
            .to_lowercase();
        let dialogue = user.split("Here was the doctor dialogue: ").nth(1).unwrap_or_default().to_lowercase();
        Ok(if !correct.is_empty() && dialogue.contains(&correct) { "Yes".into() } else { "No".into() })
    }))
}

/// Registry with one backend per role name.
pub fn registry(
    doctor: Arc<dyn ChatBackend>,
    patient: Arc<dyn ChatBackend>,
    measurement: Arc<dyn ChatBackend>,
    moderator: Arc<dyn ChatBackend>,
) -> BackendRegistry {
    BackendRegistry::new()
        .with("doctor", doctor)
        .with("patient", patient)
        .with("measurement", measurement)
        .with("moderator", moderator)
}

pub fn settings() -> clinsim::engine::EpisodeSettings {
    use clinsim::{AgentSpec, Role};
    let mut s = clinsim::engine::EpisodeSettings::uniform("x");
    s.doctor = AgentSpec::new(Role::Doctor, "doctor");
    s.patient = AgentSpec::new(Role::Patient, "patient");
    s.measurement = AgentSpec::new(Role::Measurement, "measurement");
    s.moderator = AgentSpec::new(Role::Moderator, "moderator");
    s
}

pub fn ctx<'a>(registry: &'a BackendRegistry, indexes: &'a Indexes) -> EpisodeContext<'a> {
    EpisodeContext::new(registry, indexes)
}

/// A finished episode with the given verdict and grouping metadata, for
/// report tests that do not need a transcript.
pub fn synthetic_episode(
    case: &CaseFile,
    doctor_backend: &str,
    tools: &[clinsim::toolbox::ToolKind],
    bias: Option<&str>,
    verdict: clinsim::Verdict,
    repetition: u32,
) -> clinsim::Episode {
    use clinsim::engine::OutcomeReason;
    let mut s = settings();
    s.doctor.backend = doctor_backend.into();
    s.doctor.tools.extend(tools.iter().copied());
    if let Some(b) = bias {
        s.doctor = s.doctor.with_bias(b);
    }
    let mut cfg = clinsim::EpisodeConfig::new(&case.id, s);
    cfg.repetition = repetition;
    let mut ep = clinsim::Episode::failed(&cfg, case, String::new());
    ep.error = None;
    ep.verdict = verdict;
    if verdict.is_graded() {
        ep.outcome_reason = OutcomeReason::Diagnosed;
        ep.final_diagnosis = Some("x".into());
    }
    ep
}

/// `k` Yes and `n - k` No verdicts.
pub fn verdicts(k: usize, n: usize) -> Vec<clinsim::Verdict> {
    (0..n).map(|i| if i < k { clinsim::Verdict::Yes } else { clinsim::Verdict::No }).collect()
}

#[derive(Debug, serde::Deserialize)]
pub struct CiRow {
    pub dataset: String,
    pub model: String,
    pub accuracy_percent: f64,
    pub n: usize,
    pub ci_low: i64,
    pub ci_high: i64,
}

pub fn paper_ci_rows() -> Vec<CiRow> {
    serde_json::from_slice(&std::fs::read(fixtures().join("published/ci_rows.json")).unwrap()).unwrap()
}

/// Rendered CI bounds for a printed `(accuracy, n)` pair, via verdict counts.
pub fn ci_for_row(row: &CiRow) -> [i64; 2] {
    let k = (row.accuracy_percent / 100.0 * row.n as f64).round() as usize;
    clinsim::eval::accuracy_stat(verdicts(k, row.n)).unwrap().ci_percent()
}

pub fn ci_row_matches(row: &CiRow) -> bool {
    let [lo, hi] = ci_for_row(row);
    (lo - row.ci_low).abs() <= 1 && (hi - row.ci_high).abs() <= 1
}

#[derive(Debug, serde::Deserialize)]
pub struct BiasRow {
    pub label: String,
    pub bias: f64,
    pub baseline: f64,
    pub normalized: f64,
}

pub fn paper_bias_rows() -> Vec<BiasRow> {
    serde_json::from_slice(&std::fs::read(fixtures().join("published/bias_normalized.json")).unwrap()).unwrap()
}

/// 56 notebook episodes at 23/56 and 56 baseline ones at 12/56.
pub fn tool_delta_fixture() -> Vec<clinsim::Episode> {
    use clinsim::toolbox::ToolKind;
    let case = case("medqa_pe_001");
    let mut out = Vec::new();
    for (i, v) in verdicts(12, 56).into_iter().enumerate() {
        out.push(synthetic_episode(&case, "llama3", &[], None, v, i as u32));
    }
    for (i, v) in verdicts(23, 56).into_iter().enumerate() {
        out.push(synthetic_episode(&case, "llama3", &[ToolKind::Notebook], None, v, 100 + i as u32));
    }
    out
}

pub const TWENTY_CASES: [&str; 20] = [
    "lang_es_019", "lang_fr_018", "medqa_addison_012", "medqa_aki_013", "medqa_app_004", "medqa_cap_010",
    "medqa_chole_011", "medqa_dka_002", "medqa_gout_005", "medqa_hypo_006", "medqa_ida_009", "medqa_mg_003",
    "medqa_ms_008", "medqa_pe_001", "medqa_pneumo_007", "mimic-20001", "spec_cardio_015", "spec_derm_014",
    "spec_peds_016", "spec_psych_017",
];

/// Doctor that asks, orders the first listed test, then guesses from the
/// result text.
pub fn rule_doctor() -> Arc<FnBackend> {
    use clinsim::backends::{BackendError, MessageRole};
    Arc::new(FnBackend::new("doctor", |req: &ChatRequest| {
        let users: Vec<&str> =
            req.messages.iter().filter(|m| m.role == MessageRole::User).map(|m| m.text.as_str()).collect();
        Ok::<_, BackendError>(match users.len() {
            1 => "What brings you in today?".into(),
            2 => "REQUEST TEST: Chest_X-Ray".into(),
            _ if users.iter().any(|u| u.contains("consolidation")) => "Diagnosis Ready: Community-Acquired Pneumonia".into(),
            _ if users.iter().any(|u| u.contains("pleural line")) => "Diagnosis Ready: Spontaneous Pneumothorax".into(),
            _ => "Diagnosis Ready: Pulmonary Embolism".into(),
        })
    }))
}

pub fn plain_patient() -> Arc<FnBackend> {
    Arc::new(FnBackend::new("patient", |req: &ChatRequest| {
        Ok::<_, clinsim::BackendError>(format!("It started a few days ago ({} lines).", req.messages.len()))
    }))
}

/// Records cassettes for doctor, patient and moderator by running a suite
/// over `cases` with rule-based backends. Returns the cassette directory.
pub fn record_cassettes(root: &std::path::Path, cases: &[&str]) -> PathBuf {
    use clinsim::backends::{CassetteWriter, RecordingBackend};
    let dir = root.join("cassettes");
    let rec = |name: &str, inner: Arc<dyn ChatBackend>| -> Arc<dyn ChatBackend> {
        let w = Arc::new(CassetteWriter::create(&dir.join(format!("{name}.jsonl"))).unwrap());
        Arc::new(RecordingBackend::new(inner, w))
    };
    let reg = registry(
        rec("doctor", rule_doctor()),
        rec("patient", plain_patient()),
        rec("measurement", scripted("measurement", &[])),
        rec("moderator", fair_moderator()),
    );
    let mut cfg = clinsim::engine::ExperimentConfig::new("record", cases_dir(), settings());
    cfg.output_dir = root.join("recording-run");
    cfg.case_ids = Some(cases.iter().map(|s| s.to_string()).collect());
    let r = clinsim::engine::run_suite(&cfg, &reg, &Default::default()).unwrap();
    assert!(r.complete);
    dir
}

/// Experiment whose four backends replay the cassettes in `cassettes`.
pub fn replay_experiment(id: &str, out: &std::path::Path, cassettes: &std::path::Path, cases: &[&str]) -> clinsim::engine::ExperimentConfig {
    use clinsim::backends::{BackendDescriptor, RateLimits, Wire};
    let mut cfg = clinsim::engine::ExperimentConfig::new(id, cases_dir(), settings());
    cfg.output_dir = out.to_path_buf();
    cfg.case_ids = Some(cases.iter().map(|s| s.to_string()).collect());
    cfg.backends = ["doctor", "patient", "measurement", "moderator"]
        .iter()
        .map(|n| BackendDescriptor {
            name: n.to_string(),
            wire: Wire::Replay,
            endpoint: None,
            model: None,
            credential_ref: None,
            multimodal: false,
            fixture: Some(cassettes.join(format!("{n}.jsonl"))),
            limits: RateLimits::default(),
            timeout_secs: 120,
        })
        .collect();
    cfg
}

/// Sorted `(file name, bytes)` of a run's episode files.
pub fn episode_files(run_dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(run_dir.join("episodes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

pub const MG_QUERY: &str = "What are the symptoms of myasthenia gravis?";

/// Exhaustive BM25, written from the formula without sharing code with the
/// index: reads the raw files and scores every document.
pub fn oracle_ranking(query: &str) -> Vec<(String, f64)> {
    const STOP: &str = "a an and are as at be by for from how in is it of on or that the this to was what were which with";
    let stop: Vec<&str> = STOP.split(' ').collect();
    let toks = |s: &str| -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in s.chars().chain(std::iter::once(' ')) {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else if !cur.is_empty() {
                if !stop.contains(&cur.as_str()) {
                    out.push(cur.clone());
                }
                cur.clear();
            }
        }
        out
    };
    let dir = fixtures().join("corpus");
    let mut docs: Vec<(String, Vec<String>)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), toks(&std::fs::read_to_string(&p).unwrap())))
        .collect();
    docs.sort();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.1.len()).sum::<usize>() as f64 / n;
    let mut q = toks(query);
    q.sort();
    q.dedup();
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, words)| {
            let s = q
                .iter()
                .map(|t| {
                    let df = docs.iter().filter(|d| d.1.contains(t)).count() as f64;
                    let tf = words.iter().filter(|w| *w == t).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * words.len() as f64 / avg))
                })
                .sum();
            (id.clone(), s)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
