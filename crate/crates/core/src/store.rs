//! Durable run persistence.
//!
//! Layout under the store root:
//!
//! ```text
//! <run_id>/manifest.json
//! <run_id>/iterations/<s>/state.json
//! <run_id>/iterations/<s>/dataset.jsonl
//! <run_id>/reports/<name>.json
//! ```
//!
//! Every file is replaced atomically (temp file, fsync, rename) and data files
//! are written before the manifest that references them, so a process killed
//! between any two writes leaves a store that loads.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::JobStatus;
use crate::config::RunConfig;
use crate::types::{CuratedDataset, CurationRecord, IterationState};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("store conflict: {0}")]
    StoreConflict(String),
    #[error("run {run_id} has no checkpoint for iteration {iteration}")]
    MissingCheckpoint { run_id: String, iteration: usize },
    #[error("checkpoint out of order: expected iteration {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("no such run: {0}")]
    NoSuchRun(String),
    #[error("run {run_id} is locked by process {pid}")]
    Locked { run_id: String, pid: u32 },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("injected fault at write point {0}")]
    Injected(usize),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Source of manifest timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    /// Honours `SOURCE_DATE_EPOCH` for reproducible stores.
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse::<i64>().ok())
            .and_then(|secs| Utc.timestamp_opt(secs, 0).single())
            .map_or(Clock::System, Clock::Fixed)
    }

    pub fn fixed_epoch(secs: i64) -> Self {
        Clock::Fixed(Utc.timestamp_opt(secs, 0).single().expect("valid timestamp"))
    }

    fn now(&self) -> String {
        let t = match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        };
        t.to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

/// Crash simulation: the n-th write point (0-based) fails and leaves the
/// partial state on disk, as a killed process would.
#[derive(Debug, Default)]
pub struct FaultInjector {
    fail_at: Option<usize>,
    seen: AtomicUsize,
}

impl FaultInjector {
    pub fn counting() -> Self {
        FaultInjector::default()
    }

    pub fn fail_at(point: usize) -> Self {
        FaultInjector {
            fail_at: Some(point),
            seen: AtomicUsize::new(0),
        }
    }

    /// Write points reached so far.
    pub fn points_seen(&self) -> usize {
        self.seen.load(Ordering::SeqCst)
    }

    fn hit(&self) -> Result<(), StoreError> {
        let n = self.seen.fetch_add(1, Ordering::SeqCst);
        if self.fail_at == Some(n) {
            return Err(StoreError::Injected(n));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Finetune dispatch recorded against the checkpoint whose dataset it consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub job_id: String,
    pub dataset_ref: String,
    pub parent_model_version: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_model_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub state_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneRecord>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    /// Snapshot of the run configuration, kept verbatim.
    pub config: Value,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<Checkpoint>,
    /// Dataset refs by iteration, including datasets not yet checkpointed.
    #[serde(default)]
    pub datasets: BTreeMap<usize, String>,
    #[serde(default)]
    pub reports: BTreeMap<String, String>,
    pub created_at: String,
    pub updated_at: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn config(&self) -> Result<RunConfig, serde_json::Error> {
        serde_json::from_value(self.config.clone())
    }

    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn checkpoint(&self, iteration: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.iteration == iteration)
    }

    fn check(&self) -> Result<(), String> {
        for (i, c) in self.checkpoints.iter().enumerate() {
            if c.iteration != i {
                return Err(format!("checkpoint {i} has iteration {}", c.iteration));
            }
        }
        Ok(())
    }
}

/// Everything persisted for one run, fully parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub states: Vec<IterationState>,
    pub datasets: BTreeMap<usize, CuratedDataset>,
}

/// Exclusive writer lock; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

pub struct RunStore {
    root: PathBuf,
    clock: Clock,
    faults: Option<Arc<FaultInjector>>,
}

pub fn dataset_path(iteration: usize) -> String {
    format!("iterations/{iteration}/dataset.jsonl")
}

pub fn state_path(iteration: usize) -> String {
    format!("iterations/{iteration}/state.json")
}

/// Locator handed to finetune backends.
pub fn dataset_locator(run_id: &str, iteration: usize) -> String {
    format!("store:{run_id}/{}", dataset_path(iteration))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, StoreError> {
    serde_json::from_str(text).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn dataset_jsonl(records: &[CurationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        RunStore {
            root: root.into(),
            clock: Clock::from_env(),
            faults: None,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_faults(mut self, faults: Arc<FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Absolute path of a run-relative ref or a `store:` locator.
    pub fn resolve(&self, run_id: &str, reference: &str) -> PathBuf {
        match reference.strip_prefix("store:") {
            Some(rest) => self.root.join(rest),
            None => self.run_dir(run_id).join(reference),
        }
    }

    fn fault(&self) -> Result<(), StoreError> {
        match &self.faults {
            Some(f) => f.hit(),
            None => Ok(()),
        }
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("store paths have a parent");
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        self.fault()?;
        let name = path.file_name().expect("file name").to_string_lossy();
        let tmp = dir.join(format!(".{name}.tmp"));
        let mut file = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        let half = bytes.len() / 2;
        file.write_all(&bytes[..half]).map_err(|e| StoreError::io(&tmp, e))?;
        self.fault()?;
        file.write_all(&bytes[half..]).map_err(|e| StoreError::io(&tmp, e))?;
        file.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
        drop(file);
        self.fault()?;
        fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))?;
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
        self.fault()
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id).join(MANIFEST).is_file()
    }

    /// Run ids with a manifest, sorted.
    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::io(&self.root, e)),
        };
        let mut runs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| StoreError::io(&self.root, e))?;
            let id = entry.file_name().to_string_lossy().into_owned();
            if self.run_exists(&id) {
                runs.push(id);
            }
        }
        runs.sort();
        Ok(runs)
    }

    pub fn lock(&self, run_id: &str) -> Result<RunLock, StoreError> {
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let path = dir.join(LOCK);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| StoreError::io(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if process_alive(pid) => {
                            return Err(StoreError::Locked {
                                run_id: run_id.to_string(),
                                pid,
                            })
                        }
                        _ => {
                            log::warn!("removing stale lock {}", path.display());
                            fs::remove_file(&path).map_err(|e| StoreError::io(&path, e))?;
                        }
                    }
                }
                Err(e) => return Err(StoreError::io(&path, e)),
            }
        }
        Err(StoreError::StoreConflict(format!(
            "could not acquire {}",
            path.display()
        )))
    }

    pub fn create_run(&self, run_id: &str, config: &RunConfig) -> Result<RunManifest, StoreError> {
        if self.run_exists(run_id) {
            return Err(StoreError::RunExists(run_id.to_string()));
        }
        let now = self.clock.now();
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            status: RunStatus::Running,
            stop_reason: None,
            checkpoints: Vec::new(),
            datasets: BTreeMap::new(),
            reports: BTreeMap::new(),
            created_at: now.clone(),
            updated_at: now,
            extra: BTreeMap::new(),
        };
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.run_dir(run_id).join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NoSuchRun(run_id.to_string())),
            Err(e) => return Err(StoreError::io(&path, e)),
        };
        let manifest: RunManifest = parse_json(&path, &text)?;
        manifest.check().map_err(|message| StoreError::Invalid {
            path: path.clone(),
            message,
        })?;
        Ok(manifest)
    }

    fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.run_dir(&manifest.run_id).join(MANIFEST);
        self.write_atomic(&path, &pretty(manifest))
    }

    fn update_manifest(
        &self,
        run_id: &str,
        edit: impl FnOnce(&mut RunManifest) -> Result<(), StoreError>,
    ) -> Result<RunManifest, StoreError> {
        let mut manifest = self.load_manifest(run_id)?;
        edit(&mut manifest)?;
        manifest.updated_at = self.clock.now();
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    /// Writes `D(G_s)` and records it. Re-putting identical content is a no-op;
    /// different content for a recorded dataset is a conflict.
    pub fn put_dataset(
        &self,
        run_id: &str,
        iteration: usize,
        records: &[CurationRecord],
    ) -> Result<String, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let reference = dataset_path(iteration);
        let path = self.resolve(run_id, &reference);
        let body = dataset_jsonl(records);
        let recorded = manifest.datasets.contains_key(&iteration);
        if recorded {
            let existing = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            if existing != body {
                return Err(StoreError::StoreConflict(format!(
                    "run {run_id} already has a different dataset for iteration {iteration}"
                )));
            }
            return Ok(reference);
        }
        self.write_atomic(&path, body.as_bytes())?;
        self.update_manifest(run_id, |m| {
            m.datasets.insert(iteration, reference.clone());
            Ok(())
        })?;
        Ok(reference)
    }

    pub fn load_dataset(&self, run_id: &str, iteration: usize) -> Result<CuratedDataset, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let reference = manifest
            .datasets
            .get(&iteration)
            .ok_or_else(|| StoreError::MissingCheckpoint {
                run_id: run_id.to_string(),
                iteration,
            })?;
        self.read_dataset(&self.resolve(run_id, reference))
    }

    fn read_dataset(&self, path: &Path) -> Result<CuratedDataset, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let record: CurationRecord = serde_json::from_str(line).map_err(|e| StoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(records)
    }

    /// Appends the checkpoint for `state.index`, which must directly follow the last one.
    pub fn append_checkpoint(&self, run_id: &str, state: &IterationState) -> Result<(), StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let expected = manifest.checkpoints.len();
        if state.index != expected {
            return Err(StoreError::OutOfOrder {
                expected,
                got: state.index,
            });
        }
        let reference = state_path(state.index);
        self.write_atomic(&self.resolve(run_id, &reference), &pretty(state))?;
        self.update_manifest(run_id, |m| {
            m.checkpoints.push(Checkpoint {
                iteration: state.index,
                state_ref: reference.clone(),
                dataset_ref: m.datasets.get(&state.index).cloned(),
                finetune: None,
                extra: BTreeMap::new(),
            });
            Ok(())
        })?;
        Ok(())
    }

    pub fn load_checkpoint(
        &self,
        run_id: &str,
        iteration: usize,
    ) -> Result<(IterationState, Option<String>), StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let checkpoint = manifest
            .checkpoint(iteration)
            .ok_or_else(|| StoreError::MissingCheckpoint {
                run_id: run_id.to_string(),
                iteration,
            })?;
        let state = self.read_state(&self.resolve(run_id, &checkpoint.state_ref))?;
        Ok((state, checkpoint.dataset_ref.clone()))
    }

    fn read_state(&self, path: &Path) -> Result<IterationState, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        parse_json(path, &text)
    }

    pub fn history(&self, run_id: &str) -> Result<Vec<IterationState>, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        manifest
            .checkpoints
            .iter()
            .map(|c| self.read_state(&self.resolve(run_id, &c.state_ref)))
            .collect()
    }

    pub fn record_finetune(&self, run_id: &str, iteration: usize, record: FinetuneRecord) -> Result<(), StoreError> {
        self.update_manifest(run_id, |m| {
            let checkpoint = m
                .checkpoints
                .iter_mut()
                .find(|c| c.iteration == iteration)
                .ok_or_else(|| StoreError::MissingCheckpoint {
                    run_id: run_id.to_string(),
                    iteration,
                })?;
            checkpoint.finetune = Some(record);
            Ok(())
        })?;
        Ok(())
    }

    pub fn set_status(&self, run_id: &str, status: RunStatus, reason: Option<String>) -> Result<(), StoreError> {
        self.update_manifest(run_id, |m| {
            m.status = status;
            m.stop_reason = reason;
            Ok(())
        })?;
        Ok(())
    }

    pub fn put_report<T: Serialize>(&self, run_id: &str, name: &str, report: &T) -> Result<String, StoreError> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(StoreError::Invalid {
                path: self.run_dir(run_id),
                message: format!("bad report name {name:?}"),
            });
        }
        self.load_manifest(run_id)?;
        let reference = format!("reports/{name}.json");
        self.write_atomic(&self.resolve(run_id, &reference), &pretty(report))?;
        self.update_manifest(run_id, |m| {
            m.reports.insert(name.to_string(), reference.clone());
            Ok(())
        })?;
        Ok(reference)
    }

    pub fn load_report<T: DeserializeOwned>(&self, run_id: &str, name: &str) -> Result<T, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let reference = manifest.reports.get(name).ok_or_else(|| StoreError::Invalid {
            path: self.run_dir(run_id),
            message: format!("no report named {name:?}"),
        })?;
        let path = self.resolve(run_id, reference);
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        parse_json(&path, &text)
    }

    /// Parses the manifest and everything it references.
    pub fn load_run(&self, run_id: &str) -> Result<LoadedRun, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let mut states = Vec::new();
        for c in &manifest.checkpoints {
            let state = self.read_state(&self.resolve(run_id, &c.state_ref))?;
            if state.index != c.iteration {
                return Err(StoreError::Invalid {
                    path: self.resolve(run_id, &c.state_ref),
                    message: format!("state index {} under checkpoint {}", state.index, c.iteration),
                });
            }
            states.push(state);
        }
        let mut datasets = BTreeMap::new();
        for (&s, reference) in &manifest.datasets {
            datasets.insert(s, self.read_dataset(&self.resolve(run_id, reference))?);
        }
        for reference in manifest.reports.values() {
            let path = self.resolve(run_id, reference);
            let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            parse_json::<Value>(&path, &text)?;
        }
        Ok(LoadedRun {
            manifest,
            states,
            datasets,
        })
    }
}
