//! The doctor's notebook: rewritten after every graded case, never longer
//! than 1000 characters even when the backend rambles.
//!
//!     cargo run -p clinsim --example notebook

use clinsim::backends::FnBackend;
use clinsim::toolbox::{update_notebook, Notebook, NOTEBOOK_LIMIT};

fn main() {
    // A backend that rambles well past the cap.
    let backend = FnBackend::new("notes", |req| {
        let prompt = &req.messages.last().unwrap().text;
        let lesson = if prompt.contains("Pulmonary Embolism") {
            "Pleuritic chest pain with tachycardia after travel: consider PE, order CT angiography. "
        } else {
            "Fatigable ptosis and diplopia: test for acetylcholine receptor antibodies. "
        };
        Ok(lesson.repeat(15))
    });

    let cases = [
        ("Pulmonary Embolism", "Pneumonia"),
        ("Myasthenia Gravis", "Myasthenia Gravis"),
        ("Pulmonary Embolism", "Pulmonary Embolism"),
        ("Myasthenia Gravis", "Multiple Sclerosis"),
    ];
    let mut notes = Notebook::default();
    for (correct, guessed) in cases {
        notes = update_notebook(&notes, "Doctor: ...\nPatient: ...", correct, guessed, &backend).unwrap();
        println!("revision {}: {} chars (limit {NOTEBOOK_LIMIT})", notes.revision, notes.chars());
    }
    println!("---\n{}", notes.content);
}
