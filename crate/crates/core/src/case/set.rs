use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{parse_case, CaseError, CaseFile};

#[derive(Debug, Error)]
pub enum CaseSetError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{location}: {source}")]
    Case { location: String, source: CaseError },
    #[error("duplicate case id `{0}`")]
    DuplicateId(String),
}

/// Loads a case set: either a directory of `*.json` files (sorted by file
/// name) or a JSON-Lines file with one case per line.
pub fn load_case_set(path: &Path) -> Result<Vec<CaseFile>, CaseSetError> {
    let io = |source| CaseSetError::Io { path: path.to_path_buf(), source };
    let cases = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        files.sort();
        let mut cases = Vec::with_capacity(files.len());
        for file in files {
            let raw = fs::read(&file)
                .map_err(|source| CaseSetError::Io { path: file.clone(), source })?;
            let case = parse_case(&raw).map_err(|source| CaseSetError::Case {
                location: file.display().to_string(),
                source,
            })?;
            cases.push(case);
        }
        cases
    } else {
        let text = fs::read_to_string(path).map_err(io)?;
        let mut cases = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let case = parse_case(line.as_bytes()).map_err(|source| CaseSetError::Case {
                location: format!("{}:{}", path.display(), lineno + 1),
                source,
            })?;
            cases.push(case);
        }
        cases
    };
    let mut seen = HashSet::new();
    for case in &cases {
        if !seen.insert(case.id.as_str()) {
            return Err(CaseSetError::DuplicateId(case.id.clone()));
        }
    }
    Ok(cases)
}

/// SHA-256 over the compact serialization of each case, in order.
pub fn case_set_hash(cases: &[CaseFile]) -> String {
    let mut hasher = Sha256::new();
    for case in cases {
        hasher.update(serde_json::to_vec(case).expect("case files always serialize"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
