//! Episode state machine, LLM runner and experiment suites.

mod config;
mod consultation;
mod episode;
mod runner;
mod suite;

pub use config::{
    ConfigError, EpisodeConfig, EpisodeOptions, EpisodeSettings, MeasurementMode, MultimodalMode,
    ResearchOptions, BUDGET_SWEEP, DEFAULT_BUDGET,
};
pub use consultation::{
    Consultation, DoctorOutcome, EngineError, EpisodeContext, Indexes, Phase, TurnError,
    CONTINUE_PROMPT, FORCED_DIAGNOSIS_PROMPT, OPENING_PROMPT,
};
pub use episode::{
    Actor, AttachmentRef, Episode, EpisodeLoadError, EpisodeMetadata, EpisodeMetrics,
    EpisodeWarning, LedgerError, OutcomeReason, Perception, ResearchEvent, ResearchHitRef, Turn,
    TurnKind, UsageTotals, Verdict,
};
pub use runner::run_episode;
pub use suite::{
    load_run, run_suite, CorpusPaths, ExperimentConfig, RunManifest, SuiteError, SuiteOptions,
    SuiteResult, VerdictCounts,
};
