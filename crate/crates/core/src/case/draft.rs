//! Drafting case files from free-text vignettes with a chat backend.

use serde_json::Value;
use thiserror::Error;

use super::{parse_case_value, CaseError, CaseFile};
use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};

pub const DRAFT_TEMPLATE: &str = include_str!("../../templates/draft_case.txt");

#[derive(Debug, Error)]
pub enum DraftError {
    #[error("draft rejected after retry: {}", violations.join("; "))]
    DraftRejected { violations: Vec<String> },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Asks the backend for a structured case document and validates it. One
/// retry is made with the violation list appended to the prompt.
pub fn draft_case(
    vignette: &str,
    case_id: &str,
    backend: &dyn ChatBackend,
) -> Result<CaseFile, DraftError> {
    let mut user_text = format!("Clinical vignette:\n{vignette}");
    let mut violations = Vec::new();
    for attempt in 0..2 {
        if attempt == 1 {
            user_text.push_str("\n\nYour previous document was rejected for these reasons:\n");
            for v in &violations {
                user_text.push_str(&format!("- {v}\n"));
            }
            user_text.push_str("Return a corrected JSON document only.");
        }
        let request = ChatRequest::new(vec![
            ChatMessage::system(DRAFT_TEMPLATE),
            ChatMessage::user(user_text.clone()),
        ]);
        let reply = backend.complete(&request)?;
        match check_draft(&reply.text, case_id) {
            Ok(case) => return Ok(case),
            Err(found) => violations = found,
        }
    }
    Err(DraftError::DraftRejected { violations })
}

fn check_draft(reply: &str, case_id: &str) -> Result<CaseFile, Vec<String>> {
    let json = extract_json_object(reply).ok_or_else(|| vec!["no JSON object found".to_string()])?;
    let mut value: Value = serde_json::from_str(json)
        .map_err(|e| vec![CaseError::Malformed(e.to_string()).to_string()])?;
    if let Value::Object(map) = &mut value {
        map.insert("id".into(), Value::String(case_id.to_string()));
    }
    match parse_case_value(value.clone()) {
        Ok(case) => Ok(case),
        Err(CaseError::Malformed(m)) => Err(vec![m]),
        Err(first) => {
            // report everything the validator can see, not just the first problem
            let all = serde_json::from_value::<CaseFile>(value)
                .map(|c| super::validate(&c))
                .unwrap_or_default();
            if all.is_empty() {
                Err(vec![first.to_string()])
            } else {
                Err(all.into_iter().map(|e| e.to_string()).collect())
            }
        }
    }
}

/// The outermost `{ ... }` span, which also strips markdown code fences.
fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    const D1: &str = include_str!("../../tests/fixtures/cases/medqa_pe_001.json");
    const VIGNETTE: &str = "A 45-year-old man has sudden chest pain and dyspnea while walking his dog.";

    #[test]
    fn accepts_valid_document() {
        let backend = ScriptedBackend::new("drafter", [format!("```json\n{D1}\n```")]);
        let case = draft_case(VIGNETTE, "draft-1", &backend).unwrap();
        assert_eq!(case.id, "draft-1");
        assert_eq!(case.correct_diagnosis, "Pulmonary Embolism");
    }

    #[test]
    fn malformed_twice_is_rejected() {
        let backend = ScriptedBackend::new("drafter", ["not json", "{still not json"]);
        let err = draft_case(VIGNETTE, "d", &backend).unwrap_err();
        assert!(matches!(err, DraftError::DraftRejected { .. }));
    }

    #[test]
    fn leak_then_corrected_succeeds_and_reports_violation() {
        let mut leaky: Value = serde_json::from_str(D1).unwrap();
        leaky["patient_actor"]["history"] = Value::String("I think it is a pulmonary embolism.".into());
        let backend = ScriptedBackend::new("drafter", [leaky.to_string(), D1.to_string()]);
        let case = draft_case(VIGNETTE, "d2", &backend).unwrap();
        assert_eq!(case.id, "d2");
        let calls = backend.requests();
        assert_eq!(calls.len(), 2);
        let retry_prompt = &calls[1].messages[1].text;
        assert!(retry_prompt.contains("leaks into `patient_actor.history`"), "{retry_prompt}");
    }

    #[test]
    fn backend_failure_propagates() {
        let backend = ScriptedBackend::new("drafter", Vec::<String>::new());
        assert!(matches!(
            draft_case(VIGNETTE, "d", &backend),
            Err(DraftError::Backend(BackendError::FixtureExhausted { .. }))
        ));
    }
}
