//! BM25 search over the fixture textbook corpus, the way the doctor's
//! `Research Textbooks ...` command sees it.
//!
//!     cargo run -p clinsim --example retrieval -- "What are the symptoms of myasthenia gravis?"

use std::path::Path;

use clinsim::protocol::{parse_doctor_turn, Corpus};
use clinsim::toolbox::{load_corpus, RetrievalIndex};
use clinsim::DoctorAction;

fn main() {
    let query = std::env::args().nth(1).unwrap_or_else(|| "What are the symptoms of myasthenia gravis?".into());
    let docs = load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus")).unwrap();
    let index = RetrievalIndex::build(Corpus::Textbooks, docs).unwrap();
    println!("{} documents, content hash {}", index.len(), &index.content_hash()[..12]);

    // The doctor's command is parsed first; only the query reaches the index.
    let utterance = format!("Research Textbooks '{query}'");
    let DoctorAction::Research { query, .. } = parse_doctor_turn(&utterance).action else {
        panic!("not a research command: {utterance}");
    };
    for (rank, hit) in index.retrieve(&query, 3).unwrap().iter().enumerate() {
        println!("{}. {:<32} {:.3}  {}", rank + 1, hit.doc_id, hit.score, hit.title);
    }
}
