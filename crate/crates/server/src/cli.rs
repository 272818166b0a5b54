//! Command-line entry points. Each command returns a process exit code:
//! 0 success, 2 bad input or configuration, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use clinsim::backends::{CassetteEntry, CassetteWriter, RecordingBackend, ReplayBackend};
use clinsim::case::{draft_case, ingest_mimic_reader, parse_case, validate};
use clinsim::engine::{load_run, run_suite, ExperimentConfig, SuiteError, SuiteOptions};
use clinsim::eval::{GroupKey, RatingsReport, SuiteReport};
use clinsim::{BackendError, BackendRegistry, ChatBackend};

use crate::reviews::{load_ratings, ReviewStore};
use crate::service::{router, sweep_idle, AppState};
use crate::session::SessionStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "clinsim", version, about = "Interactive clinical-diagnosis simulation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment suite.
    Run(RunArgs),
    /// Print accuracy reports for finished runs, or reader-rating summaries.
    Report(ReportArgs),
    /// Serve the human-doctor and reader-rating HTTP API.
    Serve(ServeArgs),
    /// Convert a MIMIC-IV CSV extract into case files.
    IngestMimic(IngestArgs),
    /// Draft case files from free-text vignettes with a chat backend.
    DraftCases(DraftArgs),
    /// Check case files against the schema and leak rules.
    ValidateCases(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Serve every backend from these cassette files instead of the
    /// configured ones.
    #[arg(long, value_name = "CASSETTE")]
    pub replay: Vec<PathBuf>,
    /// Record every backend call to this cassette file.
    #[arg(long, value_name = "CASSETTE", conflicts_with = "replay")]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "FILE")]
    pub experiment: PathBuf,
    #[command(flatten)]
    pub backends: BackendArgs,
    /// Override the interaction budget.
    #[arg(long)]
    pub budget: Option<u32>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Exit 3 when more episodes than this end ungraded.
    #[arg(long, default_value_t = 0)]
    pub max_ungraded: usize,
    /// Stop after this many new episodes (resume later by running again).
    #[arg(long)]
    pub max_episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to report on together.
    #[arg(long = "run", value_name = "DIR")]
    pub runs: Vec<PathBuf>,
    /// Grouping keys: model, specialty, language, tool, bias.
    #[arg(long, value_delimiter = ',', default_value = "model")]
    pub group_by: Vec<String>,
    #[arg(long)]
    pub json: bool,
    /// Summarize a reader-ratings file instead.
    #[arg(long, value_name = "FILE")]
    pub ratings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub experiment: PathBuf,
    #[command(flatten)]
    pub backends: BackendArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Where finished sessions and ratings are stored.
    #[arg(long, value_name = "DIR", default_value = "clinsim-data")]
    pub data_dir: PathBuf,
    /// Directories with episode files to offer for reader review.
    #[arg(long = "transcripts", value_name = "DIR")]
    pub transcripts: Vec<PathBuf>,
    /// Environment variable holding the shared bearer token.
    #[arg(long, value_name = "NAME")]
    pub token_env: Option<String>,
    #[arg(long, default_value_t = 60)]
    pub idle_minutes: u64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DraftArgs {
    /// JSON-Lines file of `{"id": ..., "vignette": ...}`.
    #[arg(long, value_name = "FILE")]
    pub vignettes: PathBuf,
    /// Experiment config that declares the backend.
    #[arg(long, value_name = "FILE")]
    pub experiment: PathBuf,
    #[arg(long)]
    pub backend: String,
    #[command(flatten)]
    pub backends: BackendArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// A directory of case files or a JSON-Lines case set.
    pub path: PathBuf,
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
        Command::IngestMimic(a) => cmd_ingest(a),
        Command::DraftCases(a) => cmd_draft(a),
        Command::ValidateCases(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            code
        }
    }
}

#[derive(Debug)]
struct Failure(i32, String);

fn input(e: impl std::fmt::Display) -> Failure {
    Failure(EXIT_INPUT, e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure(EXIT_RUNTIME, e.to_string())
}

fn suite_failure(e: SuiteError) -> Failure {
    match e {
        SuiteError::Io { .. } | SuiteError::Episode { .. } => runtime(e),
        _ => input(e),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(input(format!("experiment config {} not found", path.display())));
    }
    ExperimentConfig::load(path).map_err(input)
}

/// The experiment's registry, or every backend replaced by a replay of the
/// given cassettes, optionally wrapped for recording.
fn build_registry(cfg: &ExperimentConfig, args: &BackendArgs) -> Result<BackendRegistry, Failure> {
    let mut registry = if args.replay.is_empty() {
        cfg.registry().map_err(input)?
    } else {
        let mut entries: Vec<CassetteEntry> = Vec::new();
        for p in &args.replay {
            let text = std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                entries.push(
                    serde_json::from_str(line).map_err(|e| input(format!("{} line {}: {e}", p.display(), i + 1)))?,
                );
            }
        }
        let mut r = BackendRegistry::new();
        for d in &cfg.backends {
            let b = ReplayBackend::new(&d.name, entries.clone()).multimodal(d.multimodal);
            r.insert(d.name.clone(), Arc::new(b) as Arc<dyn ChatBackend>);
        }
        r
    };
    if let Some(path) = &args.record {
        let writer = Arc::new(CassetteWriter::create(path).map_err(|e| input(format!("{}: {e}", path.display())))?);
        let names: Vec<String> = registry.names().map(String::from).collect();
        for n in names {
            let inner = registry.get(&n).map_err(input)?;
            registry.insert(n, Arc::new(RecordingBackend::new(inner, writer.clone())));
        }
    }
    Ok(registry)
}

fn cmd_run(a: RunArgs) -> Result<i32, Failure> {
    let mut cfg = load_config(&a.experiment)?;
    if let Some(b) = a.budget {
        cfg.episode.budget = b;
    }
    if let Some(p) = a.parallelism {
        cfg.parallelism = p.max(1);
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    cfg.episode.validate().map_err(input)?;
    let registry = build_registry(&cfg, &a.backends)?;
    let opts = SuiteOptions { max_new_episodes: a.max_episodes, ..Default::default() };
    let r = run_suite(&cfg, &registry, &opts).map_err(suite_failure)?;
    println!("run directory: {}", r.run_dir.display());
    println!(
        "episodes: {} ({} new), yes {}, no {}, ungraded {}",
        r.episodes.len(),
        r.executed,
        r.counts.yes,
        r.counts.no,
        r.counts.ungraded
    );
    if !r.complete {
        println!("run incomplete; run the same command again to resume");
        return Ok(EXIT_RUNTIME);
    }
    if let Some(acc) = r.accuracy {
        println!("accuracy: {}", acc.render());
    }
    println!("report: {}", r.run_dir.join("report.txt").display());
    if r.counts.ungraded > a.max_ungraded {
        eprintln!("{} ungraded episodes (allowed {})", r.counts.ungraded, a.max_ungraded);
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn cmd_report(a: ReportArgs) -> Result<i32, Failure> {
    if let Some(path) = a.ratings {
        let ratings = load_ratings(&path).map_err(input)?;
        let report = RatingsReport::build(&ratings);
        if a.json {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        } else {
            print!("{}", report.to_text());
        }
        return Ok(EXIT_OK);
    }
    if a.runs.is_empty() {
        return Err(input("give at least one --run directory or --ratings file"));
    }
    let keys: Vec<GroupKey> = a.group_by.iter().map(|k| k.parse()).collect::<Result<_, _>>().map_err(input)?;
    let mut episodes = Vec::new();
    let mut names = Vec::new();
    for run in &a.runs {
        episodes.extend(load_run(run).map_err(suite_failure)?);
        names.push(run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    let report = SuiteReport::build(&names.join("+"), &episodes, &keys);
    if a.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(EXIT_OK)
}

fn cmd_serve(a: ServeArgs) -> Result<i32, Failure> {
    let cfg = load_config(&a.experiment)?;
    let registry = build_registry(&cfg, &a.backends)?;
    let cases = cfg.load_cases().map_err(suite_failure)?;
    let indexes = cfg.load_indexes().map_err(suite_failure)?;
    let token = match &a.token_env {
        Some(name) => Some(std::env::var(name).map_err(|_| input(format!("environment variable {name} is not set")))?),
        None => None,
    };
    let idle = Duration::from_secs(a.idle_minutes.max(1) * 60);
    let sessions_dir = a.data_dir.join("sessions");
    let sessions =
        SessionStore::new(cases, cfg.episode.clone(), registry, indexes, cfg.media_dir(), sessions_dir.clone(), idle);
    let mut sources = a.transcripts.clone();
    sources.push(sessions_dir);
    let reviews = ReviewStore::open(sources, a.data_dir.join("ratings.jsonl")).map_err(input)?;
    let state = Arc::new(AppState::new(sessions, reviews, token));

    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.map_err(|e| input(format!("{}: {e}", a.addr)))?;
        println!("listening on http://{}", listener.local_addr().map_err(runtime)?);
        tokio::spawn(sweep_idle(state.clone(), Duration::from_secs(30)));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(runtime)?;
        Ok(EXIT_OK)
    })
}

fn cmd_ingest(a: IngestArgs) -> Result<i32, Failure> {
    let file = std::fs::File::open(&a.input).map_err(|e| input(format!("{}: {e}", a.input.display())))?;
    let report = ingest_mimic_reader(file).map_err(input)?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    for case in &report.cases {
        let path = a.out.join(format!("{}.json", case.id));
        std::fs::write(&path, case.to_json_pretty()).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    println!(
        "wrote {} cases to {}; skipped {} patients without exactly one diagnosis; rejected {}",
        report.cases.len(),
        a.out.display(),
        report.skipped_multi_diagnosis,
        report.rejected.len()
    );
    for (id, err) in &report.rejected {
        println!("  rejected {id}: {err}");
    }
    Ok(EXIT_OK)
}

#[derive(serde::Deserialize)]
struct Vignette {
    id: String,
    vignette: String,
}

fn cmd_draft(a: DraftArgs) -> Result<i32, Failure> {
    let cfg = load_config(&a.experiment)?;
    let registry = build_registry(&cfg, &a.backends)?;
    let backend = registry.get(&a.backend).map_err(|e: BackendError| input(e))?;
    let text = std::fs::read_to_string(&a.vignettes).map_err(|e| input(format!("{}: {e}", a.vignettes.display())))?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut failed = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vignette = serde_json::from_str(line).map_err(|e| input(format!("line {}: {e}", i + 1)))?;
        match draft_case(&v.vignette, &v.id, backend.as_ref()) {
            Ok(case) => {
                let path = a.out.join(format!("{}.json", case.id));
                std::fs::write(&path, case.to_json_pretty()).map_err(runtime)?;
                println!("drafted {}", path.display());
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", v.id);
            }
        }
    }
    Ok(if failed > 0 { EXIT_RUNTIME } else { EXIT_OK })
}

fn cmd_validate(a: ValidateArgs) -> Result<i32, Failure> {
    let mut sources: Vec<(String, Vec<u8>)> = Vec::new();
    if a.path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.path)
            .map_err(input)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f).map_err(input)?;
            sources.push((f.display().to_string(), bytes));
        }
    } else {
        let text = std::fs::read_to_string(&a.path).map_err(|e| input(format!("{}: {e}", a.path.display())))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            sources.push((format!("{}:{}", a.path.display(), i + 1), line.as_bytes().to_vec()));
        }
    }
    let mut bad = 0;
    let mut ids = std::collections::HashSet::new();
    for (loc, bytes) in &sources {
        match parse_case(bytes) {
            Ok(case) if !ids.insert(case.id.clone()) => {
                bad += 1;
                println!("{loc}: duplicate case id `{}`", case.id);
            }
            Ok(case) => {
                let errors = validate(&case);
                if !errors.is_empty() {
                    bad += 1;
                }
                for e in errors {
                    println!("{loc}: {e}");
                }
            }
            Err(e) => {
                bad += 1;
                println!("{loc}: {e}");
            }
        }
    }
    println!("{} cases checked, {} invalid", sources.len(), bad);
    Ok(if bad > 0 { EXIT_INPUT } else { EXIT_OK })
}
