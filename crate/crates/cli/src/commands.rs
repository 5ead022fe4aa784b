use std::io::Write;
use std::path::{Path, PathBuf};

use dreamsync::acquisition::{acquire as run_acquisition, AcquisitionError};
use dreamsync::backends::Backends;
use dreamsync::benchmark::{
    compare_models, ingest_preference_scores, render_table, run_benchmark, BenchmarkError, BenchmarkReport,
    BenchmarkSuite, ScoringMode, SuiteName,
};
use dreamsync::corpus::{Corpus, CorpusError};
use dreamsync::pipeline::{summary_line, PipelineError, RunOutcome, Runner};
use dreamsync::store::{Clock, RunStatus, RunStore, StoreError};
use dreamsync::RunConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::settings::Settings;
use crate::{Failure, EXIT_OK, EXIT_PARTIAL};

fn open_store(root: &Path) -> RunStore {
    RunStore::open(root).with_clock(Clock::from_env())
}

fn backends(config: &RunConfig) -> Result<Backends, Failure> {
    Backends::from_config(config).map_err(|e| Failure::fatal(e.to_string()))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(|e| match e {
        CorpusError::Io { .. } => Failure::usage(e.to_string()),
        _ => Failure::data(e.to_string()),
    })
}

fn store_failure(e: StoreError) -> Failure {
    match e {
        StoreError::Parse { .. } | StoreError::Invalid { .. } => Failure::data(e.to_string()),
        _ => Failure::fatal(e.to_string()),
    }
}

fn benchmark_failure(e: BenchmarkError) -> Failure {
    match e {
        BenchmarkError::SuiteMismatch { .. } | BenchmarkError::InvalidSuite(_) | BenchmarkError::NaNScore { .. } => {
            Failure::data(e.to_string())
        }
        BenchmarkError::NoReports => Failure::usage(e.to_string()),
        _ => Failure::fatal(e.to_string()),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(c) => Failure::usage(c.to_string()),
        PipelineError::Store(StoreError::RunExists(id)) => Failure::fatal(format!(
            "run {id} already exists; continue it with `dreamsync resume {id}`"
        )),
        PipelineError::Store(s) => store_failure(s),
        PipelineError::Benchmark(b) => benchmark_failure(b),
        PipelineError::EmptyCorpus => Failure::data(e.to_string()),
        other => Failure::fatal(other.to_string()),
    }
}

/// Writes `bytes` through a sibling temp file so `path` is either absent,
/// unchanged, or complete.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| Failure::fatal(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn default_report_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    out.with_file_name(format!("{stem}.report.json"))
}

pub fn acquire(settings: &Settings, out: &Path, report_path: Option<&Path>) -> Result<u8, Failure> {
    let backends = backends(&settings.run)?;
    let plan = settings.acquisition.plan();
    let templates = plan
        .templates()
        .map_err(|e| Failure::usage(format!("templates: {e}")))?;
    let (corpus, report) =
        run_acquisition(&plan, &*backends.llm, &templates, settings.run.workers).map_err(|e| match e {
            AcquisitionError::InvalidBatch(_) => Failure::usage(e.to_string()),
            _ => Failure::fatal(e.to_string()),
        })?;

    let report_path = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_report_path(out));
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(out, corpus.to_jsonl().as_bytes())?;
    write_atomic(&report_path, format!("{report_json}\n").as_bytes())?;

    println!(
        "prompts={}/{} questions={}/{} unparseable={} dropped={} backend_failures={}",
        report.prompts_kept,
        report.prompts_generated,
        report.qa_kept,
        report.qa_generated,
        report.qa_unparseable,
        report.qa_dropped_multiple_answers + report.qa_dropped_ambiguous + report.qa_dropped_invalid,
        report.backend_failures,
    );
    if report.is_partial() {
        log::warn!(
            "acquisition was partial: {} backend failures, {} empty batches",
            report.backend_failures,
            report.empty_batches
        );
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn eval_suite(config: &RunConfig) -> Result<Option<BenchmarkSuite>, Failure> {
    let Some(path) = &config.eval_corpus else {
        return Ok(None);
    };
    let suite = BenchmarkSuite::new(config.eval_suite, load_corpus(path)?, config.eval_seeds.clone())
        .map_err(benchmark_failure)?
        .with_unasked_policy(config.unasked_policy);
    Ok(Some(suite))
}

fn drive(store: &RunStore, config: RunConfig, resume: Option<&str>) -> Result<RunOutcome, Failure> {
    let corpus_path = config
        .corpus
        .clone()
        .ok_or_else(|| Failure::usage("invalid config:\n  corpus: a training corpus is required"))?;
    let corpus = load_corpus(&corpus_path)?;
    let backends = backends(&config)?;
    let suite = eval_suite(&config)?;
    let mut runner = Runner::new(store, &backends, config, corpus)
        .map_err(pipeline_failure)?
        .on_checkpoint(|state| {
            // A closed stdout must not abort the run.
            let _ = writeln!(std::io::stdout(), "{}", summary_line(state));
            true
        });
    if let Some(suite) = suite {
        runner = runner.with_eval_suite(suite);
    }
    match resume {
        Some(run_id) => runner.resume(run_id),
        None => runner.start(),
    }
    .map_err(pipeline_failure)
}

fn print_outcome(outcome: &RunOutcome) {
    println!(
        "run={} status={} stop={} iterations={} model={}",
        outcome.run_id,
        status_name(outcome.status),
        outcome.stop_reason.as_deref().unwrap_or("-"),
        outcome.iterations,
        outcome.final_model_version
    );
}

pub fn train(settings: &Settings, store_root: &Path) -> Result<u8, Failure> {
    let store = open_store(store_root);
    let outcome = drive(&store, settings.run.clone(), None)?;
    print_outcome(&outcome);
    Ok(EXIT_OK)
}

pub fn resume(store_root: &Path, run_id: &str) -> Result<u8, Failure> {
    let store = open_store(store_root);
    let manifest = store.load_manifest(run_id).map_err(store_failure)?;
    if manifest.status == RunStatus::Completed {
        println!(
            "run={run_id} status=completed stop={} (nothing to do)",
            manifest.stop_reason.as_deref().unwrap_or("-")
        );
        return Ok(EXIT_OK);
    }
    let config = manifest
        .config()
        .map_err(|e| Failure::data(format!("run {run_id}: recorded config: {e}")))?;
    let outcome = drive(&store, config, Some(run_id))?;
    print_outcome(&outcome);
    Ok(EXIT_OK)
}

pub struct EvalArgs<'a> {
    pub suite: &'a Path,
    pub model_version: Option<&'a str>,
    pub out: &'a Path,
    pub suite_name: Option<&'a str>,
    pub mode: Option<&'a str>,
    pub preference: Option<&'a Path>,
}

/// Parses a snake_case enum value through its serde representation.
fn parse_name<T: DeserializeOwned>(name: &str) -> Result<T, Failure> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|e| Failure::usage(e.to_string()))
}

#[derive(Deserialize)]
struct PreferenceRecord {
    prompt_id: String,
    score: f64,
}

pub fn eval(settings: &Settings, args: &EvalArgs) -> Result<u8, Failure> {
    let config = &settings.run;
    let name: SuiteName = match args.suite_name {
        Some(n) => parse_name(n)?,
        None => config.eval_suite,
    };
    let mut suite = BenchmarkSuite::new(name, load_corpus(args.suite)?, config.eval_seeds.clone())
        .map_err(benchmark_failure)?
        .with_unasked_policy(config.unasked_policy);
    if let Some(mode) = args.mode {
        suite = suite.with_mode(parse_name::<ScoringMode>(mode)?);
    }
    let model_version = args.model_version.unwrap_or(&config.base_model_version);
    let backends = backends(config)?;
    let mut report = run_benchmark(&backends, &suite, model_version, config.workers).map_err(benchmark_failure)?;
    if let Some(path) = args.preference {
        let records: Vec<PreferenceRecord> = read_json(path)?;
        let records: Vec<(String, f64)> = records.into_iter().map(|r| (r.prompt_id, r.score)).collect();
        let summary = ingest_preference_scores(&records).map_err(benchmark_failure)?;
        report = report.with_external_preference(&summary);
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(args.out, format!("{json}\n").as_bytes())?;

    println!(
        "model={} suite={} mean={:.1} absolute={:.1} aesthetic={:.1} prompts={} failed={}",
        report.model_version,
        report.suite.as_str(),
        report.mean_score,
        report.absolute_score,
        report.aesthetic,
        report.prompts,
        report.prompts_failed
    );
    Ok(if report.prompts_failed > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

/// Stored report names in run order: `iter-0`, `iter-1`, ..., then anything else.
fn report_order(name: &str) -> (usize, String) {
    match name.strip_prefix("iter-").and_then(|n| n.parse::<usize>().ok()) {
        Some(n) => (n, String::new()),
        None => (usize::MAX, name.to_string()),
    }
}

pub fn report(store_root: &Path, paths: &[PathBuf], run: Option<&str>) -> Result<u8, Failure> {
    let mut reports: Vec<BenchmarkReport> = Vec::new();
    if let Some(run_id) = run {
        let store = open_store(store_root);
        let manifest = store.load_manifest(run_id).map_err(store_failure)?;
        let mut names: Vec<&String> = manifest.reports.keys().collect();
        names.sort_by_key(|n| report_order(n));
        for name in names {
            reports.push(store.load_report(run_id, name).map_err(store_failure)?);
        }
    }
    for path in paths {
        reports.push(read_json(path)?);
    }
    if reports.is_empty() {
        return Err(Failure::usage("report: give at least one report file or --run"));
    }
    let comparison = compare_models(&reports).map_err(benchmark_failure)?;
    print!("{}", render_table(&comparison));
    Ok(EXIT_OK)
}

fn status_name(status: RunStatus) -> &'static str {
    match status {
        RunStatus::Running => "running",
        RunStatus::Completed => "completed",
        RunStatus::Failed => "failed",
    }
}

pub fn inspect(store_root: &Path, run_id: &str, json: bool) -> Result<u8, Failure> {
    let store = open_store(store_root);
    let manifest = store.load_manifest(run_id).map_err(store_failure)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&manifest).expect("manifest serializes")
        );
        return Ok(EXIT_OK);
    }
    println!("run={} status={}", manifest.run_id, status_name(manifest.status));
    if let Some(reason) = &manifest.stop_reason {
        println!("stop_reason={reason}");
    }
    println!("created={} updated={}", manifest.created_at, manifest.updated_at);
    for state in store.history(run_id).map_err(store_failure)? {
        let mut line = format!("{} model={}", summary_line(&state), state.model_version);
        if let Some(ft) = manifest.checkpoint(state.index).and_then(|c| c.finetune.as_ref()) {
            line.push_str(&format!(" finetune={}:{}", ft.job_id, ft.status));
            if let Some(mv) = &ft.result_model_version {
                line.push_str(&format!(" -> {mv}"));
            }
        }
        println!("{line}");
    }
    if !manifest.reports.is_empty() {
        let mut names: Vec<&String> = manifest.reports.keys().collect();
        names.sort_by_key(|n| report_order(n));
        let names: Vec<&str> = names.into_iter().map(String::as_str).collect();
        println!("reports={}", names.join(","));
    }
    Ok(EXIT_OK)
}
