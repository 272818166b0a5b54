//! Experiments: many episodes, persisted one file each, resumable.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, EpisodeConfig, EpisodeSettings, MultimodalMode};
use super::consultation::{EpisodeContext, Indexes, Metered};
use super::episode::{Episode, EpisodeLoadError, EpisodeWarning, UsageTotals, Verdict};
use super::runner::run_episode;
use crate::backends::{BackendDescriptor, BackendError, BackendRegistry};
use crate::case::{case_set_hash, load_case_set, CaseFile, CaseSetError};
use crate::eval::{accuracy_stat, AccuracyStat, GroupKey, SuiteReport};
use crate::protocol::{Corpus, ProtocolWarning};
use crate::toolbox::{load_corpus, update_notebook, Notebook, RetrievalError, RetrievalIndex, ToolKind};

fn one() -> u32 {
    1
}

fn one_usize() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_group_by() -> Vec<GroupKey> {
    vec![GroupKey::Model]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub textbooks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internet: Option<PathBuf>,
}

/// An experiment config file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Case directory or JSON-Lines file.
    pub cases: PathBuf,
    /// Restrict to these case ids, in this order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_ids: Option<Vec<String>>,
    #[serde(default)]
    pub backends: Vec<BackendDescriptor>,
    pub episode: EpisodeSettings,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default = "one_usize")]
    pub parallelism: usize,
    #[serde(default)]
    pub corpora: CorpusPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notebook_initial: Option<String>,
    /// Backend that rewrites the notebook; defaults to the doctor's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notebook_backend: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_group_by")]
    pub report_group_by: Vec<GroupKey>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Cases(#[from] CaseSetError),
    #[error("case `{0}` is listed but not in the case set")]
    UnknownCase(String),
    #[error("case `{case}`: {source}")]
    Config { case: String, source: ConfigError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("the doctor uses the {0} research tool but no such corpus is configured")]
    MissingCorpus(&'static str),
    #[error("persisted episode {path}: {source}")]
    Episode { path: PathBuf, source: EpisodeLoadError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SuiteError + '_ {
    move |source| SuiteError::Io { path: path.to_path_buf(), source }
}

impl ExperimentConfig {
    pub fn new(experiment_id: impl Into<String>, cases: impl Into<PathBuf>, episode: EpisodeSettings) -> Self {
        ExperimentConfig {
            experiment_id: experiment_id.into(),
            cases: cases.into(),
            case_ids: None,
            backends: Vec::new(),
            episode,
            repetitions: 1,
            parallelism: 1,
            corpora: CorpusPaths::default(),
            notebook_initial: None,
            notebook_backend: None,
            output_dir: default_output_dir(),
            report_group_by: default_group_by(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SuiteError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|source| SuiteError::Parse { path: path.to_path_buf(), source })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cases_path(&self) -> PathBuf {
        self.resolve(&self.cases)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join(&self.experiment_id)
    }

    /// Directory case images resolve against.
    pub fn media_dir(&self) -> PathBuf {
        let cases = self.cases_path();
        if cases.is_dir() {
            cases
        } else {
            cases.parent().map(Path::to_path_buf).unwrap_or_default()
        }
    }

    /// SHA-256 of the config as serialized, paths as written. Output
    /// location and parallelism do not change results and are left out.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 1;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn registry(&self) -> Result<BackendRegistry, BackendError> {
        BackendRegistry::from_descriptors(&self.backends, &self.base_dir)
    }

    /// The case set, filtered and ordered by `case_ids` when given.
    pub fn load_cases(&self) -> Result<Vec<CaseFile>, SuiteError> {
        let all = load_case_set(&self.cases_path())?;
        match &self.case_ids {
            None => Ok(all),
            Some(ids) => ids
                .iter()
                .map(|id| all.iter().find(|c| &c.id == id).cloned().ok_or_else(|| SuiteError::UnknownCase(id.clone())))
                .collect(),
        }
    }

    /// Builds (or loads cached) indexes for the configured corpora.
    pub fn load_indexes(&self) -> Result<Indexes, SuiteError> {
        let mut indexes = Indexes::new();
        let cache = self.resolve(&self.output_dir).join(".index-cache");
        for (corpus, path) in [(Corpus::Textbooks, &self.corpora.textbooks), (Corpus::Internet, &self.corpora.internet)] {
            if let Some(path) = path {
                let docs = load_corpus(&self.resolve(path))?;
                indexes.insert(corpus, Arc::new(RetrievalIndex::cached(corpus, docs, &cache)?));
            }
        }
        Ok(indexes)
    }

    fn uses_notebook(&self) -> bool {
        self.episode.doctor.tools.contains(&ToolKind::Notebook)
    }

    /// Episode configs in run order: cases in order, repetitions inside.
    pub fn episode_configs(&self, cases: &[CaseFile]) -> Vec<EpisodeConfig> {
        cases
            .iter()
            .flat_map(|c| {
                (0..self.repetitions).map(|r| EpisodeConfig {
                    case_id: c.id.clone(),
                    repetition: r,
                    settings: self.episode.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub yes: usize,
    pub no: usize,
    pub ungraded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub config_hash: String,
    pub case_set_hash: String,
    pub code_version: String,
    pub episode_ids: Vec<String>,
    pub counts: VerdictCounts,
    pub usage: UsageTotals,
}

/// Outcome of [`run_suite`]. Built from the persisted files so a resumed run
/// and a clean run agree.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub experiment_id: String,
    pub run_dir: PathBuf,
    /// False when the run was cancelled before every episode finished.
    pub complete: bool,
    pub episodes: Vec<Episode>,
    pub counts: VerdictCounts,
    /// `None` when no episode was graded.
    pub accuracy: Option<AccuracyStat>,
    pub usage: UsageTotals,
    /// Episodes run by this call (not loaded from an earlier run).
    pub executed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Checked before each episode starts; episodes in flight finish.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Stop after this many newly executed episodes.
    pub max_new_episodes: Option<usize>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SuiteError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn episode_path(run_dir: &Path, id: &str) -> PathBuf {
    run_dir.join("episodes").join(format!("{id}.json"))
}

fn check_settings(cfg: &ExperimentConfig, cases: &[CaseFile], registry: &BackendRegistry, indexes: &Indexes) -> Result<(), SuiteError> {
    let s = &cfg.episode;
    for spec in s.agents() {
        registry.get(&spec.backend)?;
    }
    if let Some(name) = &cfg.notebook_backend {
        registry.get(name)?;
    }
    if s.multimodal_mode != MultimodalMode::None && !registry.get(&s.doctor.backend)?.multimodal() {
        return Err(SuiteError::Config {
            case: "*".into(),
            source: ConfigError::DoctorNotMultimodal(s.doctor.backend.clone()),
        });
    }
    if let Some(corpus) = crate::toolbox::research_corpus(&s.doctor.tools) {
        if !indexes.contains_key(&corpus) {
            return Err(SuiteError::MissingCorpus(corpus.label()));
        }
    }
    for case in cases {
        s.validate_for(case).map_err(|source| SuiteError::Config { case: case.id.clone(), source })?;
    }
    Ok(())
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    registry: &'a BackendRegistry,
    indexes: &'a Indexes,
    media_dir: PathBuf,
    run_dir: PathBuf,
    timings: Mutex<fs::File>,
}

impl Runner<'_> {
    fn run_one(&self, config: &EpisodeConfig, case: &CaseFile, notebook: Option<&Notebook>) -> Result<Episode, SuiteError> {
        let ctx = EpisodeContext {
            registry: self.registry,
            indexes: self.indexes,
            notebook,
            media_dir: Some(&self.media_dir),
        };
        let started = Instant::now();
        let mut episode = run_episode(config, case, &ctx)
            .unwrap_or_else(|e| Episode::failed(config, case, e.to_string()));
        if let Some(old) = notebook {
            self.update_notebook(&mut episode, case, old)?;
        }
        let ms = started.elapsed().as_millis();
        let path = episode_path(&self.run_dir, &episode.episode_id);
        write_atomic(&path, episode.to_json().as_bytes())?;
        let line = serde_json::json!({"episode_id": episode.episode_id, "wallclock_ms": ms});
        writeln!(self.timings.lock().unwrap(), "{line}").map_err(io_err(&self.run_dir))?;
        tracing::info!(episode = %episode.episode_id, verdict = ?episode.verdict, "episode finished");
        Ok(episode)
    }

    fn update_notebook(&self, episode: &mut Episode, case: &CaseFile, old: &Notebook) -> Result<(), SuiteError> {
        episode.notebook_before = Some(old.clone());
        episode.notebook_after = Some(old.clone());
        if !episode.verdict.is_graded() {
            return Ok(());
        }
        let name = self.cfg.notebook_backend.as_ref().unwrap_or(&self.cfg.episode.doctor.backend);
        let totals = Arc::new(Mutex::new(UsageTotals::default()));
        let backend = Metered::new(self.registry.get(name)?, "notebook", totals.clone());
        let doctor_dx = episode.final_diagnosis.clone().unwrap_or_else(|| "no diagnosis".into());
        match update_notebook(old, &episode.dialogue_text(), &case.correct_diagnosis, &doctor_dx, &backend) {
            Ok(new) => episode.notebook_after = Some(new),
            Err(e) => episode.warnings.push(EpisodeWarning {
                turn_index: episode.turns.len(),
                warning: ProtocolWarning::NotebookUpdateFailed { message: e.to_string() },
            }),
        }
        for (role, usage) in &totals.lock().unwrap().by_role {
            episode.usage.add(role, *usage);
        }
        let path = self.run_dir.join("notebook.json");
        let nb = episode.notebook_after.as_ref().expect("set above");
        write_atomic(&path, &serde_json::to_vec_pretty(nb).expect("notebook serializes"))
    }
}

/// Runs every episode of an experiment that is not already persisted under
/// `runs/<experiment_id>/episodes/`, then writes the manifest and reports.
///
/// Experiments with the notebook tool run sequentially in case order; others
/// use up to `parallelism` worker threads. A failing episode is recorded as
/// ungraded and the suite carries on.
pub fn run_suite(cfg: &ExperimentConfig, registry: &BackendRegistry, opts: &SuiteOptions) -> Result<SuiteResult, SuiteError> {
    let cases = cfg.load_cases()?;
    let indexes = cfg.load_indexes()?;
    check_settings(cfg, &cases, registry, &indexes)?;

    let run_dir = cfg.run_dir();
    fs::create_dir_all(run_dir.join("episodes")).map_err(io_err(&run_dir))?;
    let mut snapshot = serde_json::to_vec_pretty(cfg).expect("config serializes");
    snapshot.push(b'\n');
    write_atomic(&run_dir.join("config.json"), &snapshot)?;
    let timings_path = run_dir.join("timings.jsonl");
    let timings = fs::OpenOptions::new().create(true).append(true).open(&timings_path).map_err(io_err(&timings_path))?;

    let configs = cfg.episode_configs(&cases);
    let persisted: BTreeSet<String> = configs
        .iter()
        .map(EpisodeConfig::episode_id)
        .filter(|id| episode_path(&run_dir, id).exists())
        .collect();
    let todo: Vec<&EpisodeConfig> = configs.iter().filter(|c| !persisted.contains(&c.episode_id())).collect();
    let case_of = |id: &str| cases.iter().find(|c| c.id == id).expect("configs come from cases");

    let runner = Runner { cfg, registry, indexes: &indexes, media_dir: cfg.media_dir(), run_dir: run_dir.clone(), timings: Mutex::new(timings) };
    let cancelled = || opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
    let limit = opts.max_new_episodes.unwrap_or(usize::MAX);
    let mut executed = 0;

    if cfg.uses_notebook() {
        // notebook state comes from the last persisted episode in run order
        let mut notebook = cfg.notebook_initial.as_deref().map(Notebook::with_content).unwrap_or_default();
        for c in &configs {
            if persisted.contains(&c.episode_id()) {
                let path = episode_path(&run_dir, &c.episode_id());
                let ep = Episode::load(&path).map_err(|source| SuiteError::Episode { path, source })?;
                if let Some(nb) = ep.notebook_after {
                    notebook = nb;
                }
                continue;
            }
            if cancelled() || executed >= limit {
                break;
            }
            let ep = runner.run_one(c, case_of(&c.case_id), Some(&notebook))?;
            executed += 1;
            if let Some(nb) = ep.notebook_after {
                notebook = nb;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let started = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let first_error: Mutex<Option<SuiteError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..cfg.parallelism.max(1) {
                scope.spawn(|| loop {
                    if cancelled() || first_error.lock().unwrap().is_some() {
                        break;
                    }
                    if started.fetch_add(1, Ordering::SeqCst) >= limit {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(c) = todo.get(i) else { break };
                    match runner.run_one(c, case_of(&c.case_id), None) {
                        Ok(_) => {
                            done.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => {
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        executed = done.load(Ordering::SeqCst);
    }

    let mut episodes = Vec::new();
    for c in &configs {
        let path = episode_path(&run_dir, &c.episode_id());
        if path.exists() {
            episodes.push(Episode::load(&path).map_err(|source| SuiteError::Episode { path, source })?);
        }
    }
    let complete = episodes.len() == configs.len();
    let counts = VerdictCounts {
        yes: episodes.iter().filter(|e| e.verdict == Verdict::Yes).count(),
        no: episodes.iter().filter(|e| e.verdict == Verdict::No).count(),
        ungraded: episodes.iter().filter(|e| e.verdict == Verdict::Ungraded).count(),
    };
    let mut usage = UsageTotals::default();
    for e in &episodes {
        for (role, u) in &e.usage.by_role {
            usage.add(role, *u);
        }
    }
    let accuracy = accuracy_stat(episodes.iter().map(|e| e.verdict)).ok();

    if complete {
        let manifest = RunManifest {
            experiment_id: cfg.experiment_id.clone(),
            config_hash: cfg.config_hash(),
            case_set_hash: case_set_hash(&cases),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            episode_ids: episodes.iter().map(|e| e.episode_id.clone()).collect(),
            counts: counts.clone(),
            usage: usage.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&run_dir.join("manifest.json"), &bytes)?;
        let report = SuiteReport::build(&cfg.experiment_id, &episodes, &cfg.report_group_by);
        write_atomic(&run_dir.join("report.json"), report.to_json().as_bytes())?;
        write_atomic(&run_dir.join("report.txt"), report.to_text().as_bytes())?;
    }

    Ok(SuiteResult {
        experiment_id: cfg.experiment_id.clone(),
        run_dir,
        complete,
        episodes,
        counts,
        accuracy,
        usage,
        executed,
    })
}

/// Loads every episode file of a finished or partial run, sorted by id.
pub fn load_run(run_dir: &Path) -> Result<Vec<Episode>, SuiteError> {
    let dir = run_dir.join("episodes");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|path| Episode::load(&path).map_err(|source| SuiteError::Episode { path, source }))
        .collect()
}
