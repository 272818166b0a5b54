//! Plumbing check against a real provider: runs the experiment (three
//! cases by default) and checks every episode's ledger. Accuracy is not
//! asserted. Credentials come from the environment variable named in the
//! config's `credential_ref`, e.g. `ENV:OPENAI_API_KEY`.
//!
//!     OPENAI_API_KEY=... cargo run -p clinsim --example live_smoke -- examples/experiments/live-openai.json

use std::path::PathBuf;

use clinsim::engine::{run_suite, ExperimentConfig, SuiteOptions};

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/experiments/live-openai.json"));
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    let missing: Vec<&str> = cfg
        .backends
        .iter()
        .filter_map(|b| b.credential_ref.as_deref()?.strip_prefix("ENV:"))
        .filter(|var| std::env::var(var).is_err())
        .collect();
    if !missing.is_empty() {
        eprintln!("skipping live smoke test: set {}", missing.join(", "));
        return;
    }
    cfg.output_dir = std::env::temp_dir().join("clinsim-live-smoke");
    let registry = cfg.registry().unwrap();
    let result = run_suite(&cfg, &registry, &SuiteOptions::default()).unwrap();
    for ep in &result.episodes {
        if let Some(err) = &ep.error {
            println!("{:<16} failed: {err}", ep.case_id);
        }
        ep.validate_ledger().unwrap_or_else(|e| panic!("{}: {e}", ep.episode_id));
        println!("{:<16} {:?} after {} units", ep.case_id, ep.verdict, ep.budget_used());
    }
    println!("usage: {:?}", result.usage);
    println!("episodes in {}", result.run_dir.display());
}
