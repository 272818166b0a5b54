//! Bias perturbations: list the catalog, then show where an instruction
//! lands in a biased doctor's system prompt.
//!
//!     cargo run -p clinsim --example bias_prompts -- confirmation

use std::path::Path;
use std::sync::{Arc, Mutex};

use clinsim::backends::{FnBackend, ScriptedBackend};
use clinsim::bias::{bias_text, BiasCatalog, BiasSpec};
use clinsim::case::parse_case;
use clinsim::engine::{run_episode, EpisodeContext, EpisodeSettings, Indexes};
use clinsim::{AgentSpec, BackendRegistry, EpisodeConfig, Role};

fn main() {
    let kind = std::env::args().nth(1).unwrap_or_else(|| "recency".into());
    for spec in BiasCatalog::builtin().specs() {
        println!("{:<28} {:?}", spec.to_string(), spec.category());
    }

    let spec = BiasSpec::new(Role::Doctor, kind);
    let instruction = bias_text(&spec).unwrap_or_else(|e| panic!("{e}"));

    // Capture the doctor's system prompt on its first call.
    let seen = Arc::new(Mutex::new(String::new()));
    let doctor = {
        let seen = seen.clone();
        FnBackend::new("doctor", move |req| {
            *seen.lock().unwrap() = req.messages[0].text.clone();
            Ok("Diagnosis Ready: Pulmonary Embolism".into())
        })
    };
    let registry = BackendRegistry::new()
        .with("doctor", Arc::new(doctor))
        .with("patient", Arc::new(ScriptedBackend::new("patient", Vec::<String>::new())))
        .with("moderator", Arc::new(ScriptedBackend::new("moderator", ["Yes"])));
    let mut settings = EpisodeSettings::uniform("patient");
    settings.doctor = AgentSpec::new(Role::Doctor, "doctor");
    settings.doctor.bias = Some(spec.clone());
    settings.moderator = AgentSpec::new(Role::Moderator, "moderator");

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cases/medqa_pe_001.json");
    let case = parse_case(&std::fs::read(path).unwrap()).unwrap();
    let indexes = Indexes::new();
    let ep = run_episode(&EpisodeConfig::new(&case.id, settings), &case, &EpisodeContext::new(&registry, &indexes)).unwrap();

    let prompt = seen.lock().unwrap().clone();
    assert!(prompt.contains(instruction));
    println!("\n{spec} system prompt:\n{prompt}");
    println!("\nverdict {:?}", ep.verdict);
}
