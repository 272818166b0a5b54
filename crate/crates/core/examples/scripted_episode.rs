//! One consultation with scripted agents on the pulmonary-embolism case.
//!
//!     cargo run -p clinsim --example scripted_episode

use std::path::Path;
use std::sync::Arc;

use clinsim::backends::ScriptedBackend;
use clinsim::case::parse_case;
use clinsim::engine::{run_episode, EpisodeContext, EpisodeSettings, Indexes};
use clinsim::{AgentSpec, BackendRegistry, EpisodeConfig, Role};

fn scripted(name: &str, replies: &[&str]) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(name, replies.iter().copied()))
}

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cases/medqa_pe_001.json");
    let case = parse_case(&std::fs::read(path).unwrap()).unwrap();

    let registry = BackendRegistry::new()
        .with(
            "doctor",
            scripted(
                "doctor",
                &[
                    "Hello, what brings you in today?",
                    "Did anything make it better or worse?",
                    "REQUEST TEST: Chest_X-Ray",
                    "Diagnosis Ready: Pulmonary Embolism",
                ],
            ),
        )
        .with(
            "patient",
            scripted(
                "patient",
                &["Sudden chest pain and I can't catch my breath.", "Sitting still helps a bit.", "8", "7", "9"],
            ),
        )
        .with("measurement", scripted("measurement", &[]))
        .with("moderator", scripted("moderator", &["Yes"]));

    let mut settings = EpisodeSettings::uniform("unused");
    settings.doctor = AgentSpec::new(Role::Doctor, "doctor");
    settings.patient = AgentSpec::new(Role::Patient, "patient");
    settings.measurement = AgentSpec::new(Role::Measurement, "measurement");
    settings.moderator = AgentSpec::new(Role::Moderator, "moderator");
    settings.options.perception_survey = true;

    let indexes = Indexes::new();
    let episode = run_episode(&EpisodeConfig::new(&case.id, settings), &case, &EpisodeContext::new(&registry, &indexes)).unwrap();

    print!("{}", episode.dialogue_text());
    println!("---");
    println!("diagnosis: {:?}, verdict: {:?}", episode.final_diagnosis, episode.verdict);
    println!("budget used: {} of {}", episode.budget_used(), episode.config.settings.budget);
    if let Some(p) = &episode.perception {
        println!("perception survey: {p:?}");
    }
    episode.validate_ledger().expect("ledger invariants hold");
}
