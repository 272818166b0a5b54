//! Opt-in check against a real provider. Plumbing only: every episode must
//! satisfy its ledger invariants, accuracy is not asserted.
//!
//!     OPENAI_API_KEY=... cargo test -p clinsim --test live -- --ignored

use std::path::Path;

use clinsim::engine::{run_suite, ExperimentConfig, SuiteOptions};

#[test]
#[ignore = "needs network access and a provider key"]
fn three_live_cases_keep_their_invariants() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/experiments/live-openai.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    if std::env::var("OPENAI_API_KEY").is_err() {
        eprintln!("OPENAI_API_KEY is not set; nothing to check");
        return;
    }
    let out = tempfile::tempdir().unwrap();
    cfg.output_dir = out.path().to_path_buf();
    let registry = cfg.registry().unwrap();
    let result = run_suite(&cfg, &registry, &SuiteOptions::default()).unwrap();
    assert_eq!(result.episodes.len(), 3);
    for ep in &result.episodes {
        ep.validate_ledger().unwrap();
        assert!(ep.budget_used() <= ep.config.settings.budget);
    }
}
