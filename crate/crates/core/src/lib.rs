//! Interactive clinical-diagnosis simulation.
//!
//! A doctor agent interviews a patient agent and orders tests from a
//! measurement agent under a fixed interaction budget. A moderator grades the
//! final diagnosis against the case's ground truth. Agents are backed by chat
//! models (live HTTP, scripted, or cassette replay), can be perturbed with bias
//! instructions, and the doctor may be given tools (chain-of-thought variants,
//! retrieval, a persistent notebook).
//!
//! Module map:
//!
//! - [`case`]: OSCE case schema, validation, per-role views and ingestion.
//! - [`protocol`]: the doctor command grammar and reply frames.
//! - [`agents`]: role prompts and the measurement / moderator policies.
//! - [`bias`]: bias catalog and the patient perception survey.
//! - [`toolbox`]: doctor tools (CoT, reflection, retrieval, notebook).
//! - [`backends`]: chat backends, canonical request hashing, cassettes.
//! - [`engine`]: the episode state machine and suite runner.
//! - [`eval`]: accuracy statistics, reports, coverage and reader ratings.

pub mod agents;
pub mod backends;
pub mod bias;
pub mod case;
pub mod engine;
pub mod eval;
pub mod protocol;
pub mod toolbox;

mod text;

pub use agents::{AgentSpec, PromptBundle, Role};
pub use backends::{BackendError, BackendRegistry, ChatBackend, ChatRequest, Completion};
pub use case::{CaseError, CaseFile, RoleView, RoleViews};
pub use engine::{Episode, EpisodeConfig, Verdict};
pub use protocol::DoctorAction;
