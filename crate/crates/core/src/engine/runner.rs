use std::sync::Arc;

use super::config::{ConfigError, EpisodeConfig, MultimodalMode};
use super::consultation::{Consultation, DoctorOutcome, EngineError, EpisodeContext, Phase, TurnError};
use super::episode::{Actor, Episode};
use crate::backends::{BackendError, ChatBackend, ChatRequest};
use crate::case::CaseFile;
use crate::toolbox::ToolKind;

fn call_doctor(c: &mut Consultation, doctor: &Arc<dyn ChatBackend>, request: &ChatRequest) -> Result<String, BackendError> {
    let reply = doctor.complete(request)?;
    c.add_usage("doctor", reply.usage);
    Ok(reply.text)
}

/// One reflection turn. Returns false if the episode failed.
fn reflect(c: &mut Consultation, doctor: &Arc<dyn ChatBackend>) -> bool {
    let request = c.reflection_request();
    match call_doctor(c, doctor, &request) {
        Ok(text) => {
            c.record_reflection(&text);
            true
        }
        Err(e) => {
            c.fail(&e);
            false
        }
    }
}

/// Runs one episode with an LLM doctor to completion.
///
/// Configuration problems are errors. Backend failures during the run are
/// not: they yield an ungraded episode.
pub fn run_episode(config: &EpisodeConfig, case: &CaseFile, ctx: &EpisodeContext) -> Result<Episode, EngineError> {
    let settings = &config.settings;
    let doctor = ctx.registry.get(&settings.doctor.backend)?;
    let mut c = Consultation::new(config, case, ctx)?;
    if settings.multimodal_mode != MultimodalMode::None && !doctor.multimodal() {
        return Err(ConfigError::DoctorNotMultimodal(settings.doctor.backend.clone()).into());
    }
    let reflection = settings.doctor.tools.contains(&ToolKind::ReflectionCot);
    let mut just_reflected = false;

    loop {
        match c.phase() {
            Phase::Finished => break,
            Phase::AwaitingDiagnosis if !c.forced() => {
                if reflection && !just_reflected && !reflect(&mut c, &doctor) {
                    break;
                }
                just_reflected = false;
                c.force_diagnosis();
            }
            _ => {
                let request = c.doctor_request();
                let text = match call_doctor(&mut c, &doctor, &request) {
                    Ok(text) => text,
                    Err(e) => {
                        c.fail(&e);
                        break;
                    }
                };
                just_reflected = false;
                match c.doctor_turn(&text) {
                    Ok(DoctorOutcome::Replied { actor: Actor::Measurement, .. }) if reflection => {
                        if !reflect(&mut c, &doctor) {
                            break;
                        }
                        just_reflected = true;
                    }
                    Ok(_) => {}
                    Err(TurnError::Backend(e)) => {
                        c.fail(&e);
                        break;
                    }
                    Err(e) => unreachable!("runner drives the phase: {e}"),
                }
            }
        }
    }
    c.grade();
    c.survey();
    Ok(c.into_episode())
}
