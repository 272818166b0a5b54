//! Drive a consultation one doctor turn at a time, as the HTTP service
//! does for human doctors. Type doctor lines on stdin; an empty line or
//! end of input submits "Diagnosis Ready: Pulmonary Embolism".
//!
//!     cargo run -p clinsim --example consultation

use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use clinsim::backends::FnBackend;
use clinsim::case::parse_case;
use clinsim::engine::{Consultation, DoctorOutcome, EpisodeContext, EpisodeSettings, Indexes, TurnError};
use clinsim::{AgentSpec, BackendRegistry, EpisodeConfig, Role};

fn main() {
    let registry = BackendRegistry::new()
        .with("patient", Arc::new(FnBackend::new("patient", |_| Ok("It hurts when I breathe in.".into()))))
        .with("moderator", Arc::new(FnBackend::new("moderator", |_| Ok("Yes".into()))));
    let mut settings = EpisodeSettings::uniform("patient");
    settings.doctor = AgentSpec::new(Role::Doctor, "human");
    settings.moderator = AgentSpec::new(Role::Moderator, "moderator");
    settings.budget = 5;

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cases/medqa_pe_001.json");
    let case = parse_case(&std::fs::read(path).unwrap()).unwrap();
    let indexes = Indexes::new();
    let ctx = EpisodeContext::new(&registry, &indexes);
    let mut c = Consultation::new(&EpisodeConfig::new(&case.id, settings), &case, &ctx).unwrap();
    println!("{}\n", c.views().doctor.visible_facts);

    let mut lines = std::io::stdin().lock().lines().map_while(Result::ok);
    loop {
        let line = match lines.next() {
            Some(l) if !l.trim().is_empty() => l,
            _ => "Diagnosis Ready: Pulmonary Embolism".to_string(),
        };
        println!("Doctor: {line}");
        match c.doctor_turn(&line) {
            Ok(DoctorOutcome::Replied { actor, text, .. }) => {
                println!("{actor:?}: {text}   [{} left]", c.remaining());
            }
            Ok(_) => break,
            Err(TurnError::BudgetExhausted) => println!("(budget spent, only a diagnosis is accepted)"),
            Err(e) => panic!("{e}"),
        }
    }
    println!("verdict: {:?}", c.grade());
    c.into_episode().validate_ledger().unwrap();
}
