use std::collections::BTreeMap;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::bias::Rating;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderAxis {
    Doctor,
    Patient,
    Measurement,
    Empathy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisInstructions {
    pub axis: ReaderAxis,
    /// Shown before the transcript.
    pub initial: String,
    /// The rating question.
    pub follow_up: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderInstructions {
    pub informing: String,
    pub axes: Vec<AxisInstructions>,
}

static INSTRUCTIONS: LazyLock<ReaderInstructions> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../../templates/reader_instructions.json"))
        .expect("bundled reader instructions parse")
});

/// Instructions shown to clinical readers with each transcript.
pub fn reader_instructions() -> &'static ReaderInstructions {
    &INSTRUCTIONS
}

/// A clinician's rating of one transcript. Every axis is an integer in
/// `1..=10`; deserialization rejects anything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderRating {
    pub transcript_id: String,
    pub rater_id: String,
    pub doctor: Rating,
    pub patient: Rating,
    pub measurement: Rating,
    pub empathy: Rating,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comments: Option<String>,
}

impl ReaderRating {
    pub fn get(&self, axis: ReaderAxis) -> Rating {
        match axis {
            ReaderAxis::Doctor => self.doctor,
            ReaderAxis::Patient => self.patient,
            ReaderAxis::Measurement => self.measurement,
            ReaderAxis::Empathy => self.empathy,
        }
    }
}

const AXES: [ReaderAxis; 4] = [ReaderAxis::Doctor, ReaderAxis::Patient, ReaderAxis::Measurement, ReaderAxis::Empathy];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMeans {
    pub n: usize,
    pub doctor: f64,
    pub patient: f64,
    pub measurement: f64,
    pub empathy: f64,
}

impl AxisMeans {
    fn of(ratings: &[&ReaderRating]) -> Option<Self> {
        if ratings.is_empty() {
            return None;
        }
        let mean = |axis| ratings.iter().map(|r| f64::from(r.get(axis).get())).sum::<f64>() / ratings.len() as f64;
        let [doctor, patient, measurement, empathy] = AXES.map(mean);
        Some(AxisMeans { n: ratings.len(), doctor, patient, measurement, empathy })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<AxisMeans>,
    pub by_transcript: BTreeMap<String, AxisMeans>,
    pub by_rater: BTreeMap<String, AxisMeans>,
}

impl RatingsReport {
    pub fn build(ratings: &[ReaderRating]) -> Self {
        let all: Vec<&ReaderRating> = ratings.iter().collect();
        let group = |key: fn(&ReaderRating) -> &str| {
            let mut m: BTreeMap<String, Vec<&ReaderRating>> = BTreeMap::new();
            for r in ratings {
                m.entry(key(r).to_string()).or_default().push(r);
            }
            m.into_iter().filter_map(|(k, v)| AxisMeans::of(&v).map(|a| (k, a))).collect()
        };
        RatingsReport {
            overall: AxisMeans::of(&all),
            by_transcript: group(|r| &r.transcript_id),
            by_rater: group(|r| &r.rater_id),
        }
    }

    pub fn to_text(&self) -> String {
        let line = |label: &str, a: &AxisMeans| {
            format!(
                "{label:<24} n={:<4} doctor {:.1}  patient {:.1}  measurement {:.1}  empathy {:.1}\n",
                a.n, a.doctor, a.patient, a.measurement, a.empathy
            )
        };
        let mut out = String::from("Reader ratings\n");
        match &self.overall {
            Some(a) => out.push_str(&line("overall", a)),
            None => out.push_str("no ratings\n"),
        }
        for (t, a) in &self.by_transcript {
            out.push_str(&line(t, a));
        }
        out
    }
}
