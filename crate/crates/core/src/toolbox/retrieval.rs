//! Okapi BM25 over a locally supplied corpus.
//!
//! Constants: `k1 = 1.2`, `b = 0.75`,
//! `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`. Title and body are indexed
//! together. Query terms are de-duplicated. Ties are broken by ascending
//! `doc_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::Corpus;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "of",
    "on", "or", "that", "the", "this", "to", "was", "what", "were", "which", "with",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("the {0} index has no documents")]
    EmptyIndex(&'static str),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("{path}: {message}")]
    Corpus { path: PathBuf, message: String },
}

/// Lowercased alphanumeric runs, minus a short stopword list.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub title: String,
    pub score: f64,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    corpus: Corpus,
    params: Bm25Params,
    content_hash: String,
    docs: Vec<Document>,
    doc_len: Vec<u32>,
    avg_len: f64,
    doc_freq: BTreeMap<String, u32>,
    term_freq: Vec<BTreeMap<String, u32>>,
}

impl RetrievalIndex {
    pub fn build(corpus: Corpus, docs: Vec<Document>) -> Result<Self, RetrievalError> {
        Self::build_with(corpus, docs, Bm25Params::default())
    }

    pub fn build_with(
        corpus: Corpus,
        mut docs: Vec<Document>,
        params: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(RetrievalError::DuplicateDocId(w[0].doc_id.clone()));
        }
        let content_hash = content_hash(&docs, params);
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        let mut term_freq = Vec::with_capacity(docs.len());
        for d in &docs {
            let tokens = tokenize(&format!("{}\n{}", d.title, d.body));
            doc_len.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freq.push(tf);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / docs.len() as f64
        };
        Ok(RetrievalIndex { corpus, params, content_hash, docs, doc_len, avg_len, doc_freq, term_freq })
    }

    /// Loads a cached index for these documents from `cache_dir`, or builds
    /// and stores one. The cache file name carries the content hash.
    pub fn cached(
        corpus: Corpus,
        docs: Vec<Document>,
        cache_dir: &Path,
    ) -> Result<Self, RetrievalError> {
        let mut sorted = docs.clone();
        sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let hash = content_hash(&sorted, Bm25Params::default());
        let path = cache_dir.join(format!("index-{}-{}.json", corpus.label(), &hash[..16]));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(index) = serde_json::from_slice::<RetrievalIndex>(&bytes) {
                if index.content_hash == hash && index.corpus == corpus {
                    return Ok(index);
                }
            }
        }
        let index = Self::build(corpus, docs)?;
        let io_err = |e: std::io::Error| RetrievalError::Corpus { path: path.clone(), message: e.to_string() };
        std::fs::create_dir_all(cache_dir).map_err(io_err)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&index).expect("index serializes")).map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(index)
    }

    pub fn corpus(&self) -> Corpus {
        self.corpus
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of document `i` for the given distinct query terms.
    fn score(&self, i: usize, terms: &BTreeSet<String>) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let norm = if self.avg_len > 0.0 { f64::from(self.doc_len[i]) / self.avg_len } else { 0.0 };
        terms
            .iter()
            .filter_map(|t| self.term_freq[i].get(t).map(|&tf| (t, f64::from(tf))))
            .map(|(t, tf)| self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm)))
            .sum()
    }

    /// Top `k` documents for `query`, best first.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.docs.is_empty() {
            return Err(RetrievalError::EmptyIndex(self.corpus.label()));
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scored: Vec<(f64, usize)> =
            (0..self.docs.len()).map(|i| (self.score(i, &terms), i)).collect();
        // docs are sorted by id, so index order is the tiebreak
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, i)| {
                let d = &self.docs[i];
                Hit { doc_id: d.doc_id.clone(), title: d.title.clone(), score, body: d.body.clone() }
            })
            .collect())
    }
}

fn content_hash(sorted_docs: &[Document], params: Bm25Params) -> String {
    let mut h = Sha256::new();
    h.update(format!("k1={};b={}\n", params.k1, params.b));
    for d in sorted_docs {
        for part in [&d.doc_id, &d.title, &d.body] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Reads a corpus: a directory of `*.txt` files (file stem is the doc id,
/// first line the title) or a JSON-Lines file of `{doc_id, title, body}`.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let err = |p: &Path, message: String| RetrievalError::Corpus { path: p.to_path_buf(), message };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| err(path, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| {
                let text = std::fs::read_to_string(f).map_err(|e| err(f, e.to_string()))?;
                let (title, body) = text.split_once('\n').unwrap_or((&text, ""));
                Ok(Document {
                    doc_id: f.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    title: title.trim().to_string(),
                    body: body.trim().to_string(),
                })
            })
            .collect()
    } else {
        let file = std::fs::File::open(path).map_err(|e| err(path, e.to_string()))?;
        let mut docs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(path, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line)
                .map_err(|e| err(path, format!("line {}: {e}", i + 1)))?;
            docs.push(doc);
        }
        Ok(docs)
    }
}
