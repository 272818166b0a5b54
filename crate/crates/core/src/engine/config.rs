use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentSpec, AgentSpecError, Role};
use crate::case::CaseFile;

pub const DEFAULT_BUDGET: u32 = 20;

/// Budget values used in interaction-budget sweeps.
pub const BUDGET_SWEEP: [u32; 5] = [10, 15, 20, 25, 30];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultimodalMode {
    #[default]
    None,
    /// The case image goes with the first doctor prompt.
    ImageInitial,
    /// The case image comes back with an image-type test request.
    ImageOnRequest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    /// Matched section rendered verbatim.
    #[default]
    Template,
    /// The measurement agent's backend answers.
    Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResearchOptions {
    /// Passages per research call.
    pub k: usize,
    pub passage_chars: usize,
    /// Keep retrieved passages in the doctor's history for later turns.
    pub persist_in_context: bool,
}

impl Default for ResearchOptions {
    fn default() -> Self {
        ResearchOptions { k: 3, passage_chars: 1500, persist_in_context: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeOptions {
    pub measurement_mode: MeasurementMode,
    pub patient_sees_measurements: bool,
    pub perception_survey: bool,
    pub research: ResearchOptions,
    /// Ask backends for temperature-0 style decoding.
    pub deterministic: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            measurement_mode: MeasurementMode::Template,
            patient_sees_measurements: false,
            perception_survey: false,
            research: ResearchOptions::default(),
            deterministic: true,
        }
    }
}

fn default_budget() -> u32 {
    DEFAULT_BUDGET
}

/// Everything about an episode except which case it runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    #[serde(default = "default_budget")]
    pub budget: u32,
    pub doctor: AgentSpec,
    pub patient: AgentSpec,
    pub measurement: AgentSpec,
    pub moderator: AgentSpec,
    #[serde(default)]
    pub multimodal_mode: MultimodalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub options: EpisodeOptions,
}

impl EpisodeSettings {
    /// Settings with every agent on `backend` and default options.
    pub fn uniform(backend: &str) -> Self {
        EpisodeSettings {
            budget: DEFAULT_BUDGET,
            doctor: AgentSpec::new(Role::Doctor, backend),
            patient: AgentSpec::new(Role::Patient, backend),
            measurement: AgentSpec::new(Role::Measurement, backend),
            moderator: AgentSpec::new(Role::Moderator, backend),
            multimodal_mode: MultimodalMode::None,
            seed: None,
            options: EpisodeOptions::default(),
        }
    }

    pub fn agents(&self) -> [&AgentSpec; 4] {
        [&self.doctor, &self.patient, &self.measurement, &self.moderator]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        for (spec, role) in self.agents().into_iter().zip(Role::ALL) {
            if spec.role != role {
                return Err(ConfigError::RoleSlot { slot: role, found: spec.role });
            }
            spec.validate().map_err(|source| ConfigError::Agent { role, source })?;
        }
        if self.options.research.k == 0 {
            return Err(ConfigError::Invalid("research.k must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that depend on the case.
    pub fn validate_for(&self, case: &CaseFile) -> Result<(), ConfigError> {
        self.validate()?;
        if self.multimodal_mode != MultimodalMode::None && case.metadata.image_ref.is_none() {
            return Err(ConfigError::ImageModeWithoutImage(case.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub case_id: String,
    #[serde(default)]
    pub repetition: u32,
    #[serde(flatten)]
    pub settings: EpisodeSettings,
}

impl EpisodeConfig {
    pub fn new(case_id: impl Into<String>, settings: EpisodeSettings) -> Self {
        EpisodeConfig { case_id: case_id.into(), repetition: 0, settings }
    }

    pub fn episode_id(&self) -> String {
        format!("{}__r{}", self.case_id, self.repetition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("the {slot} slot holds a {found} agent")]
    RoleSlot { slot: Role, found: Role },
    #[error("{role} agent: {source}")]
    Agent { role: Role, source: AgentSpecError },
    #[error("image mode requested but case `{0}` has no image")]
    ImageModeWithoutImage(String),
    #[error("image mode needs a multimodal doctor backend, `{0}` is not")]
    DoctorNotMultimodal(String),
    #[error("{0}")]
    Invalid(String),
}
