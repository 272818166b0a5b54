//! Record backend calls to a cassette, then serve them back by request hash.
//!
//!     cargo run -p clinsim --example record_replay

use std::sync::Arc;

use clinsim::backends::{request_hash, CassetteWriter, ChatMessage, FnBackend, RecordingBackend, ReplayBackend};
use clinsim::{BackendError, ChatBackend, ChatRequest};

fn main() {
    let dir = std::env::temp_dir().join(format!("clinsim-cassette-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("patient.jsonl");

    let live = Arc::new(FnBackend::new("patient", |req| {
        Ok(format!("(live answer to: {})", req.messages.last().unwrap().text))
    }));
    let writer = Arc::new(CassetteWriter::create(&path).unwrap());
    let recorder = RecordingBackend::new(live, writer);

    let asked = ChatRequest::new(vec![
        ChatMessage::system("You are a patient in a clinic."),
        ChatMessage::user("Where does it hurt?"),
    ]);
    let first = recorder.complete(&asked).unwrap();
    println!("recorded {}: {}", &request_hash(&asked)[..12], first.text);

    let replay = ReplayBackend::from_file("patient", &path).unwrap();
    let again = replay.complete(&asked).unwrap();
    assert_eq!(again.text, first.text);
    println!("replayed: {}", again.text);

    let unseen = ChatRequest::new(vec![ChatMessage::user("Any allergies?")]);
    match replay.complete(&unseen) {
        Err(BackendError::ReplayMiss { hash }) => println!("unrecorded request {} is a miss", &hash[..12]),
        other => panic!("expected a replay miss, got {other:?}"),
    }
    std::fs::remove_dir_all(dir).ok();
}
