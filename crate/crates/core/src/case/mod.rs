//! OSCE case files.
//!
//! A [`CaseFile`] holds everything known about one simulated patient,
//! partitioned by which agent may see it. Cases are UTF-8 JSON documents whose
//! field names follow the OSCE template headings in snake case. Parsing
//! validates the schema and the leak rules; unknown fields are kept in
//! `extra` maps and written back out unchanged.

mod draft;
mod mimic;
mod set;
mod view;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::contains_ci;

pub use draft::{draft_case, DraftError, DRAFT_TEMPLATE};
pub use mimic::{ingest_mimic, ingest_mimic_reader, IngestReport, MimicError, MimicRow};
pub use set::{case_set_hash, load_case_set, CaseSetError};
pub use view::{partition, render_tree, RoleView, RoleViews};
pub(crate) use view::render_node;

/// A findings tree: named sections mapping to named findings or nested
/// sections. Leaves are free text.
pub type FindingTree = IndexMap<String, Finding>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Finding {
    Text(String),
    Section(FindingTree),
}

impl Finding {
    /// All leaf strings under this node, depth first.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Finding::Text(text) => out.push(text),
            Finding::Section(children) => {
                for child in children.values() {
                    child.collect_leaves(out);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDataset {
    Medqa,
    MimicIv,
    Nejm,
    MedmcqaSpec,
}

/// Reference to an image that accompanies a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    /// A filesystem path (relative to the case file) or an http(s) URL.
    pub uri: String,
    pub media_type: String,
}

fn default_language() -> String {
    "en".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub source_dataset: SourceDataset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<MediaRef>,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symptoms {
    pub primary_symptom: String,
    #[serde(default)]
    pub secondary_symptoms: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    #[serde(default)]
    pub demographics: String,
    #[serde(default)]
    pub history: String,
    pub symptoms: Symptoms,
    #[serde(default)]
    pub past_medical_history: String,
    #[serde(default)]
    pub social_history: String,
    #[serde(default)]
    pub review_of_systems: String,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

impl PatientProfile {
    /// Named text fields, in template order. Secondary symptoms appear one
    /// entry per symptom.
    pub fn fields(&self) -> Vec<(String, &str)> {
        let mut out = vec![
            ("patient_actor.demographics".to_string(), self.demographics.as_str()),
            ("patient_actor.history".to_string(), self.history.as_str()),
            (
                "patient_actor.symptoms.primary_symptom".to_string(),
                self.symptoms.primary_symptom.as_str(),
            ),
        ];
        for (i, s) in self.symptoms.secondary_symptoms.iter().enumerate() {
            out.push((format!("patient_actor.symptoms.secondary_symptoms[{i}]"), s.as_str()));
        }
        out.push((
            "patient_actor.past_medical_history".to_string(),
            self.past_medical_history.as_str(),
        ));
        out.push(("patient_actor.social_history".to_string(), self.social_history.as_str()));
        out.push((
            "patient_actor.review_of_systems".to_string(),
            self.review_of_systems.as_str(),
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub id: String,
    pub objective_for_doctor: String,
    pub patient_actor: PatientProfile,
    #[serde(rename = "physical_examination_findings")]
    pub physical_exam_findings: FindingTree,
    #[serde(default)]
    pub test_results: FindingTree,
    pub correct_diagnosis: String,
    pub metadata: CaseMetadata,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaseError {
    #[error("malformed case document: {0}")]
    Malformed(String),
    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("correct diagnosis leaks into `{field}`")]
    Leak { field: String },
}

impl CaseError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CaseError::Schema { field: field.into(), reason: reason.into() }
    }
}

const REQUIRED_FIELDS: &[&str] = &[
    "id",
    "objective_for_doctor",
    "patient_actor",
    "physical_examination_findings",
    "correct_diagnosis",
    "metadata",
];

/// Parses and validates one case document.
///
/// Errors are reported in a fixed order: syntax, then missing or mistyped
/// fields, then schema invariants, then leaks.
pub fn parse_case(raw: &[u8]) -> Result<CaseFile, CaseError> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| CaseError::Malformed(e.to_string()))?;
    parse_case_value(value)
}

pub(crate) fn parse_case_value(value: Value) -> Result<CaseFile, CaseError> {
    let Value::Object(map) = &value else {
        return Err(CaseError::schema("<root>", "expected a JSON object"));
    };
    for field in REQUIRED_FIELDS {
        if !map.contains_key(*field) {
            return Err(CaseError::schema(*field, "required field is missing"));
        }
    }
    if let Some(Value::Object(patient)) = map.get("patient_actor") {
        match patient.get("symptoms") {
            Some(Value::Object(symptoms)) if symptoms.contains_key("primary_symptom") => {}
            _ => {
                return Err(CaseError::schema(
                    "patient_actor.symptoms.primary_symptom",
                    "required field is missing",
                ))
            }
        }
    }
    let case: CaseFile = serde_json::from_value(value.clone()).map_err(|e| {
        let field = first_bad_field(&value).unwrap_or_else(|| "<root>".to_string());
        CaseError::schema(field, e.to_string())
    })?;
    match validate(&case).into_iter().next() {
        Some(err) => Err(err),
        None => Ok(case),
    }
}

/// Best-effort location of a type error, used to name the offending field.
fn first_bad_field(value: &Value) -> Option<String> {
    let map = value.as_object()?;
    let string_fields = ["id", "objective_for_doctor", "correct_diagnosis"];
    for f in string_fields {
        if !map.get(f).is_some_and(Value::is_string) {
            return Some(f.to_string());
        }
    }
    for f in ["patient_actor", "physical_examination_findings", "metadata"] {
        if !map.get(f).is_some_and(Value::is_object) {
            return Some(f.to_string());
        }
    }
    if let Some(t) = map.get("test_results") {
        if !t.is_object() {
            return Some("test_results".to_string());
        }
    }
    let meta = map.get("metadata")?.as_object()?;
    if serde_json::from_value::<SourceDataset>(meta.get("source_dataset")?.clone()).is_err() {
        return Some("metadata.source_dataset".to_string());
    }
    None
}

/// Returns every invariant violation, schema violations first.
pub fn validate(case: &CaseFile) -> Vec<CaseError> {
    let mut errors = Vec::new();
    if case.id.trim().is_empty() {
        errors.push(CaseError::schema("id", "must be non-empty"));
    }
    if case.correct_diagnosis.trim().is_empty() {
        errors.push(CaseError::schema("correct_diagnosis", "must be non-empty"));
    }
    if case.patient_actor.symptoms.primary_symptom.trim().is_empty() {
        errors.push(CaseError::schema("patient_actor.symptoms.primary_symptom", "must be non-empty"));
    }
    check_tree("test_results", &case.test_results, true, &mut errors);
    check_tree("physical_examination_findings", &case.physical_exam_findings, false, &mut errors);
    let is_nejm = case.metadata.source_dataset == SourceDataset::Nejm;
    match (&case.metadata.image_ref, is_nejm) {
        (None, true) => {
            errors.push(CaseError::schema("metadata.image_ref", "required for nejm cases"))
        }
        (Some(_), false) => errors.push(CaseError::schema(
            "metadata.image_ref",
            "only nejm cases carry an image",
        )),
        _ => {}
    }
    if case.metadata.language.trim().is_empty() {
        errors.push(CaseError::schema("metadata.language", "must be non-empty"));
    }

    let diagnosis = case.correct_diagnosis.as_str();
    if contains_ci(&case.objective_for_doctor, diagnosis) {
        errors.push(CaseError::Leak { field: "objective_for_doctor".into() });
    }
    for (field, text) in case.patient_actor.fields() {
        if contains_ci(text, diagnosis) {
            errors.push(CaseError::Leak { field });
        }
    }
    errors
}

fn check_tree(path: &str, tree: &FindingTree, leaves_required: bool, errors: &mut Vec<CaseError>) {
    for (key, node) in tree {
        let here = format!("{path}.{key}");
        if key.trim().is_empty() {
            errors.push(CaseError::schema(path, "empty finding name"));
        }
        match node {
            Finding::Text(text) if leaves_required && text.trim().is_empty() => {
                errors.push(CaseError::schema(here, "empty finding text"))
            }
            Finding::Text(_) => {}
            Finding::Section(children) => check_tree(&here, children, leaves_required, errors),
        }
    }
}

impl CaseFile {
    /// Pretty JSON in the on-disk case format.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("case files always serialize")
    }

    /// Names a doctor may request: test names followed by exam section names.
    pub fn requestable_names(&self) -> Vec<&str> {
        self.test_results
            .keys()
            .chain(self.physical_exam_findings.keys())
            .map(String::as_str)
            .collect()
    }

    /// Looks up a test result or exam section by its exact key.
    pub fn section(&self, name: &str) -> Option<&Finding> {
        self.test_results.get(name).or_else(|| self.physical_exam_findings.get(name))
    }

    pub fn test_leaves(&self) -> Vec<&str> {
        self.test_results.values().flat_map(Finding::leaves).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const D1: &str = include_str!("../../tests/fixtures/cases/medqa_pe_001.json");

    #[test]
    fn parses_reference_case() {
        let case = parse_case(D1.as_bytes()).unwrap();
        assert_eq!(case.correct_diagnosis, "Pulmonary Embolism");
        assert_eq!(case.metadata.source_dataset, SourceDataset::Medqa);
        assert_eq!(case.patient_actor.symptoms.secondary_symptoms.len(), 3);
        let vitals = &case.physical_exam_findings["Vital_Signs"];
        let Finding::Section(vitals) = vitals else { panic!("expected section") };
        assert_eq!(vitals["Temperature"], Finding::Text("36.8°C (98°F)".into()));
    }

    #[test]
    fn empty_diagnosis_is_schema_violation() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["correct_diagnosis"] = Value::String(String::new());
        let err = parse_case(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(err, CaseError::schema("correct_diagnosis", "must be non-empty"));
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v.as_object_mut().unwrap().remove("objective_for_doctor");
        match parse_case(v.to_string().as_bytes()).unwrap_err() {
            CaseError::Schema { field, .. } => assert_eq!(field, "objective_for_doctor"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagnosis_in_history_is_leak() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["patient_actor"]["history"] =
            Value::String("Worried about a pulmonary embolism since this morning.".into());
        let err = parse_case(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(err, CaseError::Leak { field: "patient_actor.history".into() });
    }

    #[test]
    fn diagnosis_in_objective_is_leak() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["objective_for_doctor"] = Value::String("Confirm PULMONARY EMBOLISM.".into());
        assert!(matches!(
            parse_case(v.to_string().as_bytes()),
            Err(CaseError::Leak { field }) if field == "objective_for_doctor"
        ));
    }

    #[test]
    fn syntax_error_is_malformed() {
        assert!(matches!(parse_case(b"{\"id\": "), Err(CaseError::Malformed(_))));
    }

    #[test]
    fn mistyped_field_is_schema_violation() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["metadata"]["source_dataset"] = Value::String("pubmed".into());
        match parse_case(v.to_string().as_bytes()).unwrap_err() {
            CaseError::Schema { field, .. } => assert_eq!(field, "metadata.source_dataset"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nejm_requires_image() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["metadata"]["source_dataset"] = Value::String("nejm".into());
        assert!(matches!(
            parse_case(v.to_string().as_bytes()),
            Err(CaseError::Schema { field, .. }) if field == "metadata.image_ref"
        ));
        v["metadata"]["source_dataset"] = Value::String("medqa".into());
        v["metadata"]["image_ref"] = serde_json::json!({"uri": "x.png", "media_type": "image/png"});
        assert!(parse_case(v.to_string().as_bytes()).is_err());
    }

    #[test]
    fn empty_test_leaf_rejected() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["test_results"]["Electrocardiogram"]["Findings"] = Value::String(" ".into());
        assert!(matches!(
            parse_case(v.to_string().as_bytes()),
            Err(CaseError::Schema { field, .. }) if field == "test_results.Electrocardiogram.Findings"
        ));
    }

    #[test]
    fn unknown_fields_round_trip() {
        let mut v: Value = serde_json::from_str(D1).unwrap();
        v["curator_notes"] = serde_json::json!({"reviewed": true});
        v["metadata"]["source_question_id"] = Value::from(4411);
        let case = parse_case(v.to_string().as_bytes()).unwrap();
        assert_eq!(case.extra["curator_notes"]["reviewed"], Value::Bool(true));
        let again = parse_case(case.to_json_pretty().as_bytes()).unwrap();
        assert_eq!(again, case);
        let back: Value = serde_json::from_str(&case.to_json_pretty()).unwrap();
        assert_eq!(back["metadata"]["source_question_id"], Value::from(4411));
    }
}
