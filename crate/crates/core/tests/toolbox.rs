mod common;

use std::collections::HashMap;

use clinsim::backends::{BackendError, FnBackend};
use clinsim::protocol::Corpus;
use clinsim::toolbox::{load_corpus, update_notebook, Notebook, RetrievalIndex, NOTEBOOK_LIMIT};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn index() -> RetrievalIndex {
    let docs = load_corpus(&common::fixtures().join("corpus")).unwrap();
    assert_eq!(docs.len(), 20);
    RetrievalIndex::build(Corpus::Textbooks, docs).unwrap()
}

#[test]
fn myasthenia_query_ranks_target_first() {
    let idx = index();
    let hits = idx.retrieve(common::MG_QUERY, 20).unwrap();
    let oracle = common::oracle_ranking(common::MG_QUERY);
    assert_eq!(hits[0].doc_id, "neuro_myasthenia_gravis");
    assert_eq!(oracle[0].0, "neuro_myasthenia_gravis");
    assert!(oracle[0].1 > oracle[1].1, "strict winner");
    assert_eq!(hits.len(), oracle.len());
    for (h, (id, s)) in hits.iter().zip(&oracle) {
        assert_eq!(&h.doc_id, id);
        assert!((h.score - s).abs() < 1e-9, "{id}: {} vs {s}", h.score);
    }
}

#[test]
fn other_queries_agree_with_oracle() {
    let idx = index();
    for q in [
        "fatigable ptosis diplopia worse in the evening",
        "crushing chest pain ST elevation",
        "ascending weakness after diarrhoea",
        "proximal weakness improving with repeated effort",
        "zzz unknown words",
    ] {
        let hits = idx.retrieve(q, 5).unwrap();
        let oracle = common::oracle_ranking(q);
        for (h, (id, s)) in hits.iter().zip(&oracle) {
            assert_eq!(&h.doc_id, id, "{q}");
            assert!((h.score - s).abs() < 1e-9);
        }
    }
}

fn adversarial(rng: &mut StdRng) -> String {
    const PIECES: &[&str] = &["a", "é", "ü", "中", "文", "🩺", "👩‍⚕️", "\u{301}", "\n", " ", "[Note #1] ", "ß", "𝔘"];
    let len = match rng.gen_range(0..4) {
        0 => rng.gen_range(0..50),
        1 => rng.gen_range(990..1010),
        _ => rng.gen_range(0..3000),
    };
    (0..len).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

#[test]
fn notebook_cap_over_randomized_cycles() {
    let mut rng = StdRng::seed_from_u64(7);
    let mut nb = Notebook::with_content(&adversarial(&mut rng));
    assert!(nb.chars() <= NOTEBOOK_LIMIT);
    for cycle in 0..1000u64 {
        let reply = adversarial(&mut rng);
        let fail = rng.gen_bool(0.1);
        let b = FnBackend::new("nb", move |_| if fail { Err(BackendError::Transport("down".into())) } else { Ok(reply.clone()) });
        match update_notebook(&nb, "Doctor: hi\nPatient: ok\n", "Myasthenia gravis", "Myasthenia gravis", &b) {
            Ok(next) => {
                assert_eq!(next.revision, nb.revision + 1);
                nb = next;
            }
            Err(_) => assert!(fail, "cycle {cycle}"),
        }
        assert!(nb.chars() <= NOTEBOOK_LIMIT, "cycle {cycle}: {}", nb.chars());
        assert!(nb.content.len() <= 4 * NOTEBOOK_LIMIT);
        // valid String means no split codepoint; re-encoding must be lossless
        assert_eq!(String::from_utf8(nb.content.as_bytes().to_vec()).unwrap(), nb.content);
    }
}

proptest! {
    #[test]
    fn notebook_never_exceeds_limit(s in "\\PC{0,1500}") {
        let b = FnBackend::new("nb", move |_| Ok(s.clone()));
        let nb = update_notebook(&Notebook::default(), "", "x", "y", &b).unwrap();
        prop_assert!(nb.chars() <= NOTEBOOK_LIMIT);
    }

    #[test]
    fn retrieval_matches_oracle_for_word_bags(words in proptest::collection::vec("[a-z]{3,9}|myasthenia|gravis|ptosis|weakness|chest|pain", 1..6)) {
        let q = words.join(" ");
        let idx = index();
        let hits = idx.retrieve(&q, 3).unwrap();
        let oracle: HashMap<String, f64> = common::oracle_ranking(&q).into_iter().collect();
        for h in hits {
            prop_assert!((h.score - oracle[&h.doc_id]).abs() < 1e-9);
        }
    }
}
