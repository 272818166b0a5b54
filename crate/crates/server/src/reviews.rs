//! Reader-study queue: transcripts to rate and the ratings collected.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clinsim::engine::Episode;
use clinsim::eval::{reader_instructions, ReaderInstructions, ReaderRating};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptForReview {
    pub transcript_id: String,
    pub case_id: String,
    pub dialogue: String,
    pub instructions: ReaderInstructions,
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown transcript `{0}`")]
    UnknownTranscript(String),
    #[error("{0}")]
    Invalid(String),
    #[error("rater `{rater}` already rated `{transcript}`")]
    Duplicate { transcript: String, rater: String },
    #[error("ratings file: {0}")]
    Io(#[from] std::io::Error),
}

/// Transcripts come from episode files under the given directories (and
/// their `episodes/` subdirectories); ratings are appended to a JSON-Lines
/// file.
pub struct ReviewStore {
    sources: Vec<PathBuf>,
    ratings_path: PathBuf,
    rated: Mutex<HashSet<(String, String)>>,
}

impl ReviewStore {
    pub fn open(sources: Vec<PathBuf>, ratings_path: PathBuf) -> Result<Self, ReviewError> {
        let mut rated = HashSet::new();
        for r in load_ratings(&ratings_path)? {
            rated.insert((r.transcript_id, r.rater_id));
        }
        Ok(ReviewStore { sources, ratings_path, rated: Mutex::new(rated) })
    }

    /// Episodes by id. Files that do not parse are skipped.
    pub fn transcripts(&self) -> BTreeMap<String, Episode> {
        let mut out = BTreeMap::new();
        for dir in &self.sources {
            for d in [dir.clone(), dir.join("episodes")] {
                let Ok(entries) = std::fs::read_dir(&d) else { continue };
                for e in entries.flatten() {
                    let p = e.path();
                    if p.extension().is_some_and(|x| x == "json") {
                        if let Ok(ep) = Episode::load(&p) {
                            if !ep.turns.is_empty() {
                                out.insert(ep.episode_id.clone(), ep);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The first transcript, by id, this rater has not rated yet.
    pub fn next_for(&self, rater: &str) -> Option<TranscriptForReview> {
        let rated = self.rated.lock().unwrap();
        self.transcripts()
            .into_values()
            .find(|e| !rated.contains(&(e.episode_id.clone(), rater.to_string())))
            .map(|e| TranscriptForReview {
                transcript_id: e.episode_id.clone(),
                case_id: e.case_id.clone(),
                dialogue: e.dialogue_text(),
                instructions: reader_instructions().clone(),
            })
    }

    pub fn submit(&self, rating: ReaderRating) -> Result<(), ReviewError> {
        if rating.rater_id.trim().is_empty() {
            return Err(ReviewError::Invalid("rater_id is empty".into()));
        }
        if !self.transcripts().contains_key(&rating.transcript_id) {
            return Err(ReviewError::UnknownTranscript(rating.transcript_id));
        }
        let mut rated = self.rated.lock().unwrap();
        let key = (rating.transcript_id.clone(), rating.rater_id.clone());
        if rated.contains(&key) {
            return Err(ReviewError::Duplicate { transcript: key.0, rater: key.1 });
        }
        if let Some(dir) = self.ratings_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.ratings_path)?;
        let mut line = serde_json::to_string(&rating).expect("ratings serialize");
        line.push('\n');
        file.write_all(line.as_bytes())?;
        rated.insert(key);
        Ok(())
    }

    pub fn ratings(&self) -> Result<Vec<ReaderRating>, ReviewError> {
        load_ratings(&self.ratings_path)
    }
}

/// Reads a ratings file; a missing file is an empty list.
pub fn load_ratings(path: &Path) -> Result<Vec<ReaderRating>, ReviewError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReviewError::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
