//! Accuracy statistics, grouped reports, information coverage and reader
//! ratings.

mod coverage;
mod ratings;
mod report;
mod stats;

pub use coverage::{
    annotate, apply_overrides, coverage_ratio, coverage_request, match_facts, read_jsonl,
    summarize_coverage, CoverageAnnotation, CoverageError, CoverageOverride, CoverageSummary,
    FactSet,
};
pub use ratings::{
    reader_instructions, AxisInstructions, AxisMeans, RatingsReport, ReaderAxis,
    ReaderInstructions, ReaderRating,
};
pub use report::{GroupKey, GroupRow, PerceptionMeans, Report, ReportError, SuiteReport, BASELINE};
pub use stats::{
    accuracy_stat, accuracy_stat_with, ci95, normalized_bias_accuracy, AccuracyStat, Interval,
    StatsError,
};
