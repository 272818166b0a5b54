//! Role prompts and the measurement and moderator policies.
//!
//! Prompt templates live in `templates/` as text with `{name}` placeholders.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Attachment, BackendError, ChatBackend, ChatMessage, ChatRequest, MessageRole};
use crate::bias::{bias_text, BiasSpec, UnknownBias};
use crate::case::{render_node, CaseFile, RoleView};
use crate::protocol::{normalize_test_name, parse_moderator_verdict, Grade, MeasurementReply, ProtocolWarning};
use crate::text::fill_template;
use crate::toolbox::{check_tools, tool_blocks, ConflictingTools, Notebook, ToolKind};

const DOCTOR: &str = include_str!("../../templates/doctor.txt");
const PATIENT: &str = include_str!("../../templates/patient.txt");
const MEASUREMENT: &str = include_str!("../../templates/measurement.txt");
const MODERATOR_SYSTEM: &str = include_str!("../../templates/moderator_system.txt");
const MODERATOR_USER: &str = include_str!("../../templates/moderator_user.txt");
const LANGUAGE_DOCTOR: &str = include_str!("../../templates/language_doctor.txt");
const LANGUAGE_AGENT: &str = include_str!("../../templates/language_agent.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Doctor,
    Patient,
    Measurement,
    Moderator,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Doctor, Role::Patient, Role::Measurement, Role::Moderator];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Doctor => "doctor",
            Role::Patient => "patient",
            Role::Measurement => "measurement",
            Role::Moderator => "moderator",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown role `{s}`"))
    }
}

/// Display name for a language tag, used in the language directive.
/// Unknown tags are used as given.
pub fn language_label(tag: &str) -> &str {
    let primary = tag.split(['-', '_']).next().unwrap_or(tag);
    match primary.to_ascii_lowercase().as_str() {
        "en" => "English",
        "zh" => "Chinese",
        "hi" => "Hindi",
        "ko" => "Korean",
        "es" => "Spanish",
        "fr" => "French",
        "fa" => "Persian",
        _ => tag,
    }
}

fn is_english(tag: &str) -> bool {
    language_label(tag) == "English"
}

fn default_language() -> String {
    "en".into()
}

/// Configuration of one agent in an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: Role,
    /// Name of a backend in the experiment's registry.
    pub backend: String,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSpec>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tools: BTreeSet<ToolKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentSpecError {
    #[error("a {bias_role} bias cannot be given to the {role} agent")]
    BiasRoleMismatch { role: Role, bias_role: Role },
    #[error(transparent)]
    UnknownBias(#[from] UnknownBias),
    #[error("tools are only available to the doctor, not the {0} agent")]
    ToolsOnNonDoctor(Role),
    #[error(transparent)]
    ConflictingTools(#[from] ConflictingTools),
}

impl AgentSpec {
    pub fn new(role: Role, backend: impl Into<String>) -> Self {
        AgentSpec { role, backend: backend.into(), language: default_language(), bias: None, tools: BTreeSet::new() }
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = language.into();
        self
    }

    pub fn with_bias(mut self, kind: impl Into<String>) -> Self {
        self.bias = Some(BiasSpec::new(self.role, kind));
        self
    }

    pub fn with_tool(mut self, tool: ToolKind) -> Self {
        self.tools.insert(tool);
        self
    }

    pub fn validate(&self) -> Result<(), AgentSpecError> {
        if let Some(bias) = &self.bias {
            if bias.role != self.role {
                return Err(AgentSpecError::BiasRoleMismatch { role: self.role, bias_role: bias.role });
            }
            bias_text(bias)?;
        }
        if !self.tools.is_empty() && self.role != Role::Doctor {
            return Err(AgentSpecError::ToolsOnNonDoctor(self.role));
        }
        check_tools(&self.tools)?;
        Ok(())
    }
}

/// A system prompt plus the conversation the agent sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    #[serde(default)]
    pub turn_context: Vec<ChatMessage>,
    #[serde(default)]
    pub image_attachments: Vec<Attachment>,
}

impl PromptBundle {
    pub fn new(system_text: String) -> Self {
        PromptBundle { system_text, turn_context: Vec::new(), image_attachments: Vec::new() }
    }

    /// The request for this bundle. Image attachments go on the first user
    /// message.
    pub fn to_request(&self) -> ChatRequest {
        let mut messages = Vec::with_capacity(self.turn_context.len() + 1);
        messages.push(ChatMessage::system(self.system_text.clone()));
        messages.extend(self.turn_context.iter().cloned());
        if !self.image_attachments.is_empty() {
            if let Some(first_user) = messages.iter_mut().find(|m| m.role == MessageRole::User) {
                first_user.attachments.extend(self.image_attachments.iter().cloned());
            }
        }
        ChatRequest::new(messages)
    }
}

fn bias_block(bias: Option<&BiasSpec>) -> Result<String, UnknownBias> {
    Ok(match bias {
        Some(spec) => format!("\n\n{}", bias_text(spec)?),
        None => String::new(),
    })
}

fn language_block(template: &str, language: &str) -> String {
    if is_english(language) {
        String::new()
    } else {
        fill_template(template, &[("target_language", language_label(language))])
            .expect("language template placeholders")
    }
}

/// The doctor system prompt. `asked_so_far` is the number of budget units
/// already used; the prompt shows it plus one.
pub fn build_doctor_prompt(
    view: &RoleView,
    budget_total: u32,
    asked_so_far: u32,
    tools: &BTreeSet<ToolKind>,
    language: &str,
    bias: Option<&BiasSpec>,
    notebook: Option<&Notebook>,
) -> Result<PromptBundle, UnknownBias> {
    let blocks = tool_blocks(tools, notebook, budget_total);
    let tool_block = if blocks.is_empty() { String::new() } else { format!("\n\n{}", blocks.render()) };
    let text = fill_template(
        DOCTOR,
        &[
            ("max_infs", &budget_total.to_string()),
            ("infs_plus_one", &(asked_so_far + 1).to_string()),
            ("tool_block", &tool_block),
            ("bias_block", &bias_block(bias)?),
            ("view", &view.visible_facts),
            ("language_block", &language_block(LANGUAGE_DOCTOR, language)),
        ],
    )
    .expect("doctor template placeholders");
    Ok(PromptBundle::new(text))
}

pub fn build_patient_prompt(
    view: &RoleView,
    language: &str,
    bias: Option<&BiasSpec>,
) -> Result<PromptBundle, UnknownBias> {
    let text = fill_template(
        PATIENT,
        &[
            ("language_block", &language_block(LANGUAGE_AGENT, language)),
            ("bias_block", &bias_block(bias)?),
            ("view", &view.visible_facts),
        ],
    )
    .expect("patient template placeholders");
    Ok(PromptBundle::new(text))
}

pub fn build_measurement_prompt(view: &RoleView, language: &str) -> PromptBundle {
    let text = fill_template(
        MEASUREMENT,
        &[("language_block", &language_block(LANGUAGE_AGENT, language)), ("view", &view.visible_facts)],
    )
    .expect("measurement template placeholders");
    PromptBundle::new(text)
}

/// Deterministic measurement policy: the matched exam section or test,
/// rendered verbatim, else Normal Readings.
pub fn measurement_reply(case: &CaseFile, test_name: &str) -> MeasurementReply {
    match normalize_test_name(test_name, case.requestable_names()) {
        Some(name) => {
            let node = case.section(&name).expect("normalized names come from the case");
            let mut text = String::new();
            render_node(&name, node, 0, &mut text);
            MeasurementReply::Results { text: text.trim_end().to_string() }
        }
        None => MeasurementReply::NormalReadings,
    }
}

/// LLM measurement policy: the measurement agent answers the doctor's raw
/// request and the reply is framed.
pub fn measurement_reply_via(
    prompt: &PromptBundle,
    raw_request: &str,
    backend: &dyn ChatBackend,
) -> Result<MeasurementReply, BackendError> {
    let mut bundle = prompt.clone();
    bundle.turn_context.push(ChatMessage::user(raw_request));
    let reply = backend.complete(&bundle.to_request())?;
    Ok(MeasurementReply::from_backend_text(&reply.text))
}

pub fn moderator_request(correct: &str, doctor_dialogue: &str) -> ChatRequest {
    let user = fill_template(MODERATOR_USER, &[("correct_diagnosis", correct), ("diagnosis", doctor_dialogue)])
        .expect("moderator template placeholders");
    ChatRequest::new(vec![ChatMessage::system(MODERATOR_SYSTEM), ChatMessage::user(user)])
}

/// Grades a diagnosis. Backend errors propagate; the engine marks the
/// episode ungraded.
pub fn moderate(
    correct: &str,
    doctor_dialogue: &str,
    backend: &dyn ChatBackend,
) -> Result<(Grade, Option<ProtocolWarning>), BackendError> {
    let reply = backend.complete(&moderator_request(correct, doctor_dialogue))?;
    Ok(parse_moderator_verdict(&reply.text))
}
