use serde::{Deserialize, Serialize};

use super::{CaseFile, Finding, FindingTree};
use crate::agents::Role;

/// The facts one agent is allowed to see, rendered as a text block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleView {
    pub role: Role,
    pub visible_facts: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleViews {
    pub doctor: RoleView,
    pub patient: RoleView,
    pub measurement: RoleView,
    pub moderator: RoleView,
}

impl RoleViews {
    pub fn get(&self, role: Role) -> &RoleView {
        match role {
            Role::Doctor => &self.doctor,
            Role::Patient => &self.patient,
            Role::Measurement => &self.measurement,
            Role::Moderator => &self.moderator,
        }
    }
}

/// Splits a validated case into the four per-role views.
///
/// The doctor sees the objective and demographics, the patient the profile,
/// the measurement agent exam findings and test results, and the moderator
/// only the correct diagnosis.
pub fn partition(case: &CaseFile) -> RoleViews {
    RoleViews {
        doctor: RoleView { role: Role::Doctor, visible_facts: doctor_facts(case) },
        patient: RoleView { role: Role::Patient, visible_facts: patient_facts(case) },
        measurement: RoleView { role: Role::Measurement, visible_facts: measurement_facts(case) },
        moderator: RoleView {
            role: Role::Moderator,
            visible_facts: format!("Correct diagnosis: {}", case.correct_diagnosis),
        },
    }
}

fn doctor_facts(case: &CaseFile) -> String {
    let mut out = format!("Objective for doctor: {}", case.objective_for_doctor);
    if !case.patient_actor.demographics.is_empty() {
        out.push_str(&format!("\nDemographics: {}", case.patient_actor.demographics));
    }
    out
}

fn patient_facts(case: &CaseFile) -> String {
    let p = &case.patient_actor;
    let mut lines = Vec::new();
    let mut push = |label: &str, value: &str| {
        if !value.is_empty() {
            lines.push(format!("{label}: {value}"));
        }
    };
    push("Demographics", &p.demographics);
    push("History", &p.history);
    push("Primary symptom", &p.symptoms.primary_symptom);
    push("Secondary symptoms", &p.symptoms.secondary_symptoms.join("; "));
    push("Past medical history", &p.past_medical_history);
    push("Social history", &p.social_history);
    push("Review of systems", &p.review_of_systems);
    lines.join("\n")
}

fn measurement_facts(case: &CaseFile) -> String {
    let mut out = String::from("Physical examination findings:\n");
    out.push_str(&render_tree(&case.physical_exam_findings, 0));
    if !case.test_results.is_empty() {
        out.push_str("\nTest results:\n");
        out.push_str(&render_tree(&case.test_results, 0));
    }
    out.trim_end().to_string()
}

/// Renders a findings tree as indented `name: value` lines.
pub fn render_tree(tree: &FindingTree, depth: usize) -> String {
    let mut out = String::new();
    for (name, node) in tree {
        render_node(name, node, depth, &mut out);
    }
    out
}

pub(crate) fn render_node(name: &str, node: &Finding, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match node {
        Finding::Text(text) => out.push_str(&format!("{pad}{name}: {text}\n")),
        Finding::Section(children) => {
            out.push_str(&format!("{pad}{name}:\n"));
            out.push_str(&render_tree(children, depth + 1));
        }
    }
}
