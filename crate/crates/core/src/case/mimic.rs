//! Conversion of a tabular EHR extract into case files.
//!
//! The extract is a CSV with the columns
//! `subject_id, diagnosis, event_kind, event_name, event_value`:
//!
//! - `diagnosis` holds one or more `;`-separated diagnoses. A patient's
//!   diagnosis list is the de-duplicated union over all of their rows.
//! - `event_kind = lab`: `event_name` is an analyte (`Hemoglobin`) or
//!   `Panel/Analyte`. Known analytes are grouped into CBC and BMP panels,
//!   anything else lands in `Other_Labs`.
//! - `event_kind = micro`: stored under the `Microbiology` test.
//! - `event_kind = note`: `event_name` selects a case field
//!   (`objective_for_doctor`, `demographics`, `history`, `primary_symptom`,
//!   `secondary_symptom`, `past_medical_history`, `social_history`,
//!   `review_of_systems`) or an exam finding as `exam/Section/Finding`.
//!   Other note names are appended to the history as `name: value`.
//!
//! Only patients with exactly one diagnosis become cases.

use std::io::Read;

use indexmap::IndexMap;
use serde::Deserialize;
use thiserror::Error;

use super::{validate, CaseError, CaseFile, CaseMetadata, Finding, FindingTree, PatientProfile, SourceDataset, Symptoms};

pub const CBC_PANEL: &str = "Complete_Blood_Count (CBC)";
pub const BMP_PANEL: &str = "Basic_Metabolic_Panel (BMP)";
const OTHER_LABS: &str = "Other_Labs";
const MICROBIOLOGY: &str = "Microbiology";
const DEFAULT_OBJECTIVE: &str = "Evaluate and diagnose the patient.";

const CBC_ANALYTES: &[&str] = &[
    "white blood cells", "red blood cells", "hemoglobin", "hematocrit", "platelet count", "mcv",
    "mch", "mchc", "rdw", "neutrophils", "lymphocytes", "monocytes", "eosinophils", "basophils",
];
const BMP_ANALYTES: &[&str] = &[
    "alanine aminotransferase", "aspartate aminotransferase", "bicarbonate", "bilirubin total",
    "chloride", "creatinine", "anion gap", "potassium", "sodium", "urea nitrogen", "glucose",
    "calcium", "lactate dehydrogenase", "lipase",
];

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct MimicRow {
    pub subject_id: String,
    #[serde(default)]
    pub diagnosis: String,
    pub event_kind: String,
    #[serde(default)]
    pub event_name: String,
    #[serde(default)]
    pub event_value: String,
}

#[derive(Debug, Error)]
pub enum MimicError {
    #[error("extract shape error at row {row}: {reason}")]
    ExtractShape { row: usize, reason: String },
    #[error("reading extract: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub cases: Vec<CaseFile>,
    /// Patients with zero or several diagnoses.
    pub skipped_multi_diagnosis: usize,
    /// Single-diagnosis patients whose case failed validation.
    pub rejected: Vec<(String, CaseError)>,
}

const COLUMNS: [&str; 5] = ["subject_id", "diagnosis", "event_kind", "event_name", "event_value"];

/// Reads a CSV extract and ingests it.
pub fn ingest_mimic_reader<R: Read>(reader: R) -> Result<IngestReport, MimicError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(MimicError::ExtractShape { row: 1, reason: format!("missing column `{col}`") });
        }
    }
    let mut rows = Vec::new();
    for record in rdr.deserialize() {
        rows.push(record?);
    }
    ingest_mimic(&rows)
}

#[derive(Default)]
struct Patient {
    diagnoses: Vec<String>,
    profile: PatientProfile,
    objective: Option<String>,
    exam: FindingTree,
    tests: FindingTree,
}

pub fn ingest_mimic(rows: &[MimicRow]) -> Result<IngestReport, MimicError> {
    let mut patients: IndexMap<String, Patient> = IndexMap::new();
    for (i, row) in rows.iter().enumerate() {
        // header is row 1
        let row_no = i + 2;
        let subject = row.subject_id.trim();
        if subject.is_empty() {
            return Err(MimicError::ExtractShape { row: row_no, reason: "empty subject_id".into() });
        }
        let patient = patients.entry(subject.to_string()).or_default();
        for dx in row.diagnosis.split(';').map(str::trim).filter(|d| !d.is_empty()) {
            if !patient.diagnoses.iter().any(|d| d.eq_ignore_ascii_case(dx)) {
                patient.diagnoses.push(dx.to_string());
            }
        }
        let name = row.event_name.trim();
        let value = row.event_value.trim();
        match row.event_kind.trim() {
            "lab" => {
                let (panel, analyte) = match name.split_once('/') {
                    Some((panel, analyte)) => (panel.trim().to_string(), analyte.trim()),
                    None => (lab_panel(name).to_string(), name),
                };
                insert_unique(section_mut(&mut patient.tests, &panel), analyte, value);
            }
            "micro" => insert_unique(section_mut(&mut patient.tests, MICROBIOLOGY), name, value),
            "note" => apply_note(patient, name, value),
            "" => {}
            other => {
                return Err(MimicError::ExtractShape {
                    row: row_no,
                    reason: format!("unknown event_kind `{other}`"),
                })
            }
        }
    }

    let mut report = IngestReport::default();
    for (subject, patient) in patients {
        if patient.diagnoses.len() != 1 {
            report.skipped_multi_diagnosis += 1;
            continue;
        }
        let case = CaseFile {
            id: format!("mimic-{subject}"),
            objective_for_doctor: patient.objective.unwrap_or_else(|| DEFAULT_OBJECTIVE.into()),
            patient_actor: patient.profile,
            physical_exam_findings: patient.exam,
            test_results: patient.tests,
            correct_diagnosis: patient.diagnoses.into_iter().next().unwrap_or_default(),
            metadata: CaseMetadata {
                source_dataset: SourceDataset::MimicIv,
                specialty: None,
                language: "en".into(),
                image_ref: None,
                extra: IndexMap::new(),
            },
            extra: IndexMap::new(),
        };
        match validate(&case).into_iter().next() {
            None => report.cases.push(case),
            Some(err) => report.rejected.push((subject, err)),
        }
    }
    Ok(report)
}

fn lab_panel(analyte: &str) -> &'static str {
    let key = analyte.to_lowercase();
    if CBC_ANALYTES.contains(&key.as_str()) {
        CBC_PANEL
    } else if BMP_ANALYTES.contains(&key.as_str()) {
        BMP_PANEL
    } else {
        OTHER_LABS
    }
}

fn section_mut<'a>(tree: &'a mut FindingTree, name: &str) -> &'a mut FindingTree {
    let node = tree
        .entry(name.to_string())
        .or_insert_with(|| Finding::Section(FindingTree::new()));
    if let Finding::Text(text) = node {
        let mut section = FindingTree::new();
        section.insert("Findings".into(), Finding::Text(std::mem::take(text)));
        *node = Finding::Section(section);
    }
    match node {
        Finding::Section(section) => section,
        Finding::Text(_) => unreachable!("converted above"),
    }
}

/// Repeated measurements keep every value: `Hemoglobin`, `Hemoglobin (2)`, ...
fn insert_unique(section: &mut FindingTree, name: &str, value: &str) {
    if value.is_empty() {
        return;
    }
    let name = if name.is_empty() { "Result" } else { name };
    let mut key = name.to_string();
    let mut n = 1;
    while section.contains_key(&key) {
        n += 1;
        key = format!("{name} ({n})");
    }
    section.insert(key, Finding::Text(value.to_string()));
}

fn append(field: &mut String, value: &str) {
    if !field.is_empty() {
        field.push(' ');
    }
    field.push_str(value);
}

fn apply_note(patient: &mut Patient, name: &str, value: &str) {
    if value.is_empty() {
        return;
    }
    let p = &mut patient.profile;
    match name {
        "objective_for_doctor" => patient.objective = Some(value.to_string()),
        "demographics" => append(&mut p.demographics, value),
        "history" => append(&mut p.history, value),
        "primary_symptom" => p.symptoms = Symptoms {
            primary_symptom: value.to_string(),
            secondary_symptoms: std::mem::take(&mut p.symptoms.secondary_symptoms),
        },
        "secondary_symptom" => p.symptoms.secondary_symptoms.push(value.to_string()),
        "past_medical_history" => append(&mut p.past_medical_history, value),
        "social_history" => append(&mut p.social_history, value),
        "review_of_systems" => append(&mut p.review_of_systems, value),
        _ => match name.strip_prefix("exam/") {
            Some(path) => {
                let (section, finding) = path.split_once('/').unwrap_or((path, "Findings"));
                insert_unique(section_mut(&mut patient.exam, section), finding, value);
            }
            None => append(&mut p.history, &format!("{name}: {value}")),
        },
    }
}
