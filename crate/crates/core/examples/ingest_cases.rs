//! Turn a MIMIC-IV style CSV extract into case files, validate them and
//! show what each agent gets to see.
//!
//!     cargo run -p clinsim --example ingest_cases

use std::path::Path;

use clinsim::case::{ingest_mimic_reader, partition, validate};

fn main() {
    let csv = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mimic/extract.csv");
    let report = ingest_mimic_reader(std::fs::File::open(csv).unwrap()).unwrap();
    println!(
        "{} cases, {} patients skipped for having several diagnoses, {} rejected",
        report.cases.len(),
        report.skipped_multi_diagnosis,
        report.rejected.len()
    );

    let Some(case) = report.cases.first() else { return };
    assert!(validate(case).is_empty());
    let views = partition(case);
    println!("\n== {} (answer: {}) ==", case.id, case.correct_diagnosis);
    println!("-- doctor --\n{}", views.doctor.visible_facts);
    println!("-- patient --\n{}", views.patient.visible_facts);
    println!("-- measurement --\n{}", views.measurement.visible_facts);
}
