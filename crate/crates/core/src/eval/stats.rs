use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Verdict;

const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    /// Normal approximation, `p ± 1.96·se`.
    #[default]
    Wald,
    Wilson,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no graded episodes")]
    EmptySample,
    #[error("baseline accuracy is zero")]
    ZeroBaseline,
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStat {
    pub n_graded: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub std_error: f64,
    /// Clamped to `[0, 1]`.
    pub ci95: [f64; 2],
}

/// 95% interval for a proportion `p` observed over `n` trials, clamped to
/// `[0, 1]`.
pub fn ci95(p: f64, n: usize, interval: Interval) -> [f64; 2] {
    let n = n as f64;
    let (lo, hi) = match interval {
        Interval::Wald => {
            let se = (p * (1.0 - p) / n).sqrt();
            (p - Z95 * se, p + Z95 * se)
        }
        Interval::Wilson => {
            let z2 = Z95 * Z95;
            let denom = 1.0 + z2 / n;
            let centre = (p + z2 / (2.0 * n)) / denom;
            let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
            (centre - half, centre + half)
        }
    };
    [lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)]
}

impl AccuracyStat {
    pub fn from_counts(n_correct: usize, n_graded: usize, interval: Interval) -> Result<Self, StatsError> {
        if n_graded == 0 {
            return Err(StatsError::EmptySample);
        }
        assert!(n_correct <= n_graded, "more correct than graded");
        let accuracy = n_correct as f64 / n_graded as f64;
        Ok(AccuracyStat {
            n_graded,
            n_correct,
            accuracy,
            std_error: (accuracy * (1.0 - accuracy) / n_graded as f64).sqrt(),
            ci95: ci95(accuracy, n_graded, interval),
        })
    }

    /// Accuracy in tenths of a percent, rounded.
    pub fn tenths(&self) -> i64 {
        tenths(self.accuracy)
    }

    /// `"62.1"`.
    pub fn percent(&self) -> String {
        format_tenths(self.tenths())
    }

    /// CI bounds as whole percents.
    pub fn ci_percent(&self) -> [i64; 2] {
        self.ci95.map(|b| (b * 100.0).round() as i64)
    }

    /// `"62.1% [55%, 69%]"`.
    pub fn render(&self) -> String {
        let [lo, hi] = self.ci_percent();
        format!("{}% [{lo}%, {hi}%]", self.percent())
    }
}

pub(crate) fn tenths(fraction: f64) -> i64 {
    (fraction * 1000.0).round() as i64
}

pub(crate) fn format_tenths(t: i64) -> String {
    let sign = if t < 0 { "-" } else { "" };
    format!("{sign}{}.{}", t.abs() / 10, t.abs() % 10)
}

/// Accuracy over graded verdicts; ungraded ones are skipped.
pub fn accuracy_stat(verdicts: impl IntoIterator<Item = Verdict>) -> Result<AccuracyStat, StatsError> {
    accuracy_stat_with(verdicts, Interval::Wald)
}

pub fn accuracy_stat_with(
    verdicts: impl IntoIterator<Item = Verdict>,
    interval: Interval,
) -> Result<AccuracyStat, StatsError> {
    let (mut graded, mut correct) = (0, 0);
    for v in verdicts {
        match v {
            Verdict::Yes => {
                graded += 1;
                correct += 1;
            }
            Verdict::No => graded += 1,
            Verdict::Ungraded => {}
        }
    }
    AccuracyStat::from_counts(correct, graded, interval)
}

/// Biased accuracy as a percentage of the unbiased baseline.
pub fn normalized_bias_accuracy(acc_bias: f64, acc_baseline: f64) -> Result<f64, StatsError> {
    for a in [acc_bias, acc_baseline] {
        if !(0.0..=1.0).contains(&a) {
            return Err(StatsError::OutOfRange(a.to_string()));
        }
    }
    if acc_baseline == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * acc_bias / acc_baseline)
}
