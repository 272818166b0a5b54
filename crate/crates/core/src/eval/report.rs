use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stats::{accuracy_stat, format_tenths, AccuracyStat};
use crate::bias::SurveyField;
use crate::engine::{Episode, Verdict};

/// Label of the group without a tool or bias.
pub const BASELINE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Model,
    Specialty,
    Language,
    Tool,
    Bias,
}

impl GroupKey {
    pub const ALL: [GroupKey; 5] =
        [GroupKey::Model, GroupKey::Specialty, GroupKey::Language, GroupKey::Tool, GroupKey::Bias];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Model => "model",
            GroupKey::Specialty => "specialty",
            GroupKey::Language => "language",
            GroupKey::Tool => "tool",
            GroupKey::Bias => "bias",
        }
    }

    /// The group an episode falls in.
    pub fn group_of(self, e: &Episode) -> String {
        let m = &e.metadata;
        match self {
            GroupKey::Model => m.doctor_backend.clone(),
            GroupKey::Specialty => m.specialty.clone().unwrap_or_else(|| "unspecified".into()),
            GroupKey::Language => m.language.clone(),
            GroupKey::Tool if m.tools.is_empty() => BASELINE.into(),
            GroupKey::Tool => m.tools.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+"),
            GroupKey::Bias => m.bias.clone().unwrap_or_else(|| BASELINE.into()),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("unknown group key `{0}` (expected model, specialty, language, tool or bias)")]
    UnknownGroupKey(String),
}

impl FromStr for GroupKey {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupKey::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ReportError::UnknownGroupKey(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMeans {
    pub confidence: Option<f64>,
    pub compliance: Option<f64>,
    pub consultation: Option<f64>,
    /// Episodes that had a survey.
    pub n: usize,
}

impl PerceptionMeans {
    pub fn of<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Option<Self> {
        let surveyed: Vec<_> = episodes.into_iter().filter_map(|e| e.perception.as_ref()).collect();
        if surveyed.is_empty() {
            return None;
        }
        let mean = |field: SurveyField| {
            let vals: Vec<f64> =
                surveyed.iter().filter_map(|p| p.scores.get(field)).map(|r| f64::from(r.get())).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(PerceptionMeans {
            confidence: mean(SurveyField::Confidence),
            compliance: mean(SurveyField::Compliance),
            consultation: mean(SurveyField::Consultation),
            n: surveyed.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub stat: AccuracyStat,
    pub n_ungraded: usize,
    /// Accuracy minus the baseline group's, in percentage points, computed
    /// from the one-decimal values shown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Accuracy as a percentage of the baseline group's (bias reports).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception: Option<PerceptionMeans>,
    /// The accuracy cell as printed, e.g. `41.1 (+19.7)`.
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub group_by: GroupKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<AccuracyStat>,
    pub n_ungraded: usize,
    pub rows: Vec<GroupRow>,
    /// Group accuracies, recombined by size, equal the overall accuracy.
    pub consistent: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn graded<'a>(episodes: &'a [&Episode]) -> impl Iterator<Item = Verdict> + 'a {
    episodes.iter().map(|e| e.verdict)
}

impl Report {
    /// Accuracy matrix grouped by `key`. Groups with no graded episode are
    /// left out with a warning.
    pub fn build(episodes: &[Episode], key: GroupKey) -> Report {
        let mut groups: BTreeMap<String, Vec<&Episode>> = BTreeMap::new();
        for e in episodes {
            groups.entry(key.group_of(e)).or_default().push(e);
        }
        let overall = accuracy_stat(episodes.iter().map(|e| e.verdict)).ok();
        let n_ungraded = episodes.iter().filter(|e| !e.verdict.is_graded()).count();
        let mut warnings = Vec::new();
        let mut rows = Vec::new();
        for (group, members) in &groups {
            let ungraded = members.iter().filter(|e| !e.verdict.is_graded()).count();
            match accuracy_stat(graded(members)) {
                Ok(stat) => rows.push(GroupRow {
                    group: group.clone(),
                    stat,
                    n_ungraded: ungraded,
                    delta: None,
                    normalized: None,
                    perception: PerceptionMeans::of(members.iter().copied()),
                    display: stat.percent(),
                }),
                Err(_) => warnings.push(format!(
                    "{key} group `{group}` has no graded episodes ({ungraded} ungraded); row omitted"
                )),
            }
        }

        let baseline = rows.iter().find(|r| r.group == BASELINE).map(|r| r.stat);
        if matches!(key, GroupKey::Tool | GroupKey::Bias) {
            match baseline {
                Some(base) => {
                    for row in rows.iter_mut().filter(|r| r.group != BASELINE) {
                        let d = row.stat.tenths() - base.tenths();
                        row.delta = Some(d as f64 / 10.0);
                        let sign = if d >= 0 { "+" } else { "" };
                        row.display = format!("{} ({sign}{})", row.stat.percent(), format_tenths(d));
                        if key == GroupKey::Bias && base.accuracy > 0.0 {
                            row.normalized = Some(100.0 * row.stat.accuracy / base.accuracy);
                        }
                    }
                }
                None if !rows.is_empty() => {
                    warnings.push(format!("no `{BASELINE}` {key} group; deltas not computed"))
                }
                None => {}
            }
        }

        let (correct, total) = rows.iter().fold((0, 0), |(c, n), r| (c + r.stat.n_correct, n + r.stat.n_graded));
        let consistent = match overall {
            Some(o) => o.n_correct == correct && o.n_graded == total,
            None => rows.is_empty(),
        };
        Report { group_by: key, overall, n_ungraded, rows, consistent, warnings }
    }

    pub fn row(&self, group: &str) -> Option<&GroupRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Accuracy by {}\n", self.group_by);
        let width = self.rows.iter().map(|r| r.group.chars().count()).max().unwrap_or(5).max(5);
        let perception = self.rows.iter().any(|r| r.perception.is_some());
        let normalized = self.rows.iter().any(|r| r.normalized.is_some());
        out.push_str(&format!("{:<width$}  {:>5}  {:>8}  {:<16}  {:<10}", "group", "n", "ungraded", "accuracy", "95% CI"));
        if normalized {
            out.push_str("  normalized");
        }
        if perception {
            out.push_str("  confidence  compliance  consultation");
        }
        out.push('\n');
        for r in &self.rows {
            let [lo, hi] = r.stat.ci_percent();
            out.push_str(&format!(
                "{:<width$}  {:>5}  {:>8}  {:<16}  {:<10}",
                r.group,
                r.stat.n_graded,
                r.n_ungraded,
                r.display,
                format!("[{lo}%, {hi}%]")
            ));
            if normalized {
                out.push_str(&format!("  {:>10}", r.normalized.map(|v| format!("{v:.1}")).unwrap_or_default()));
            }
            if let Some(p) = r.perception {
                let cell = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "  {:>10}  {:>10}  {:>12}",
                    cell(p.confidence),
                    cell(p.compliance),
                    cell(p.consultation)
                ));
            }
            out.push('\n');
        }
        match &self.overall {
            Some(o) => out.push_str(&format!("overall: {} over {} graded", o.render(), o.n_graded)),
            None => out.push_str("overall: no graded episodes"),
        }
        out.push_str(&format!(", {} ungraded\n", self.n_ungraded));
        if !self.consistent {
            out.push_str("WARNING: group totals do not add up to the overall figure\n");
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// The reports written at the end of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub experiment_id: String,
    pub n_episodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<AccuracyStat>,
    pub n_ungraded: usize,
    pub reports: Vec<Report>,
}

impl SuiteReport {
    pub fn build(experiment_id: &str, episodes: &[Episode], keys: &[GroupKey]) -> Self {
        SuiteReport {
            experiment_id: experiment_id.to_string(),
            n_episodes: episodes.len(),
            overall: accuracy_stat(episodes.iter().map(|e| e.verdict)).ok(),
            n_ungraded: episodes.iter().filter(|e| !e.verdict.is_graded()).count(),
            reports: keys.iter().map(|&k| Report::build(episodes, k)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Experiment {}: {} episodes", self.experiment_id, self.n_episodes);
        match &self.overall {
            Some(o) => out.push_str(&format!(", accuracy {}", o.render())),
            None => out.push_str(", no graded episodes"),
        }
        out.push_str(&format!(", {} ungraded\n", self.n_ungraded));
        for r in &self.reports {
            out.push('\n');
            out.push_str(&r.to_text());
        }
        out
    }
}
