//! Run a suite from an experiment file, stop it half way, and resume.
//!
//!     cargo run -p clinsim --example run_suite

use std::path::Path;

use clinsim::engine::{run_suite, ExperimentConfig, SuiteOptions};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/experiments/scripted-suite.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    let out = std::env::temp_dir().join(format!("clinsim-suite-{}", std::process::id()));
    cfg.output_dir = out.clone();
    let registry = cfg.registry().unwrap();

    // Only two episodes this time; the next call picks up the rest.
    let first = run_suite(&cfg, &registry, &SuiteOptions { max_new_episodes: Some(2), ..Default::default() }).unwrap();
    println!("first pass: {} episodes, complete = {}", first.executed, first.complete);
    let rest = run_suite(&cfg, &registry, &SuiteOptions::default()).unwrap();
    println!("resumed: {} more, complete = {}", rest.executed, rest.complete);

    print!("{}", std::fs::read_to_string(rest.run_dir.join("report.txt")).unwrap());
    std::fs::remove_dir_all(out).ok();
}
