//! The self-training loop.
//!
//! Iteration `s` samples `K` candidates per prompt from `G_s`, keeps the best
//! passing candidate per prompt, persists the curated dataset and a
//! checkpoint, and finetunes `G_s` on that dataset to obtain `G_{s+1}`.
//! Every step is recorded in the [`RunStore`] before the next one starts, so
//! a run killed at any point resumes from its last checkpoint and produces
//! the same bytes an uninterrupted run would.

use std::thread;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{BackendError, Backends, JobStatus};
use crate::benchmark::{run_benchmark, score_image, BenchmarkError, BenchmarkSuite, ScoringMode};
use crate::config::{InvalidConfig, ResamplePolicy, RunConfig};
use crate::corpus::{Corpus, CorpusEntry};
use crate::scoring::{filter_candidates, select_representative, UnaskedPolicy};
use crate::store::{dataset_locator, FinetuneRecord, RunStatus, RunStore, StoreError};
use crate::types::{CurationRecord, FinetuneSpec, ImageRef, IterationState, QuestionSet, ScoredCandidate};
use crate::validate_config;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] InvalidConfig),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error("corpus has no prompt with questions")]
    EmptyCorpus,
    #[error("every sample for prompt {prompt_id} failed: {last_error}")]
    AllSamplesFailed { prompt_id: String, last_error: String },
    #[error("iteration {iteration} aborted: {failed} of {attempted} prompts failed")]
    IterationAborted {
        iteration: usize,
        failed: usize,
        attempted: usize,
    },
    #[error("finetune job {job_id} did not finish after {polls} polls")]
    FinetuneTimeout { job_id: String, polls: u32 },
    #[error("run stopped after checkpoint {iteration}")]
    Interrupted { iteration: usize },
    #[error("run {run_id} is already {status:?}")]
    Finished { run_id: String, status: RunStatus },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    /// Failures caused by a backend rather than by local state or input.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(_)
                | PipelineError::AllSamplesFailed { .. }
                | PipelineError::IterationAborted { .. }
                | PipelineError::FinetuneTimeout { .. }
                | PipelineError::Benchmark(BenchmarkError::Backend(_) | BenchmarkError::BenchmarkAborted { .. })
        )
    }
}

/// Deterministic id for configs without an explicit `run_id`.
pub fn derive_run_id(config: &RunConfig) -> String {
    let digest = Sha256::digest(serde_json::to_vec(config).expect("config serializes"));
    format!("run-{}", hex::encode(&digest[..6]))
}

fn rng_for(seed: u64, stream: &str, iteration: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(stream.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(iteration.to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Indices into `usable` (corpus entries with questions) drawn for iteration `s`.
/// The result is sorted so datasets list prompts in corpus order.
pub fn plan_iteration(
    usable: usize,
    per_iteration: usize,
    policy: ResamplePolicy,
    seed: u64,
    iteration: usize,
) -> Vec<usize> {
    let take = per_iteration.min(usable);
    let all: Vec<usize> = (0..usable).collect();
    let mut picked = match policy {
        ResamplePolicy::Fresh => all
            .choose_multiple(&mut rng_for(seed, "fresh", iteration as u64), take)
            .copied()
            .collect(),
        ResamplePolicy::Fixed => all
            .choose_multiple(&mut rng_for(seed, "fresh", 0), take)
            .copied()
            .collect(),
        ResamplePolicy::Disjoint => {
            let mut order = all;
            order.shuffle(&mut rng_for(seed, "disjoint", 0));
            (0..take)
                .map(|i| order[(iteration * take + i) % usable])
                .collect::<Vec<_>>()
        }
    };
    picked.sort_unstable();
    picked
}

/// Samples seeds `0..k` from `model_version`. Failed seeds are skipped;
/// the call fails only when every seed fails.
pub fn sample_candidates(
    backends: &Backends,
    entry: &CorpusEntry,
    model_version: &str,
    k: usize,
) -> Result<Vec<ImageRef>, PipelineError> {
    let mut images = Vec::with_capacity(k);
    let mut last_error = None;
    for seed in 0..k as u64 {
        match backends.generate_image(&entry.prompt, seed, model_version) {
            Ok(image) => images.push(image),
            Err(e) => {
                log::warn!("prompt {} seed {seed}: {e}", entry.prompt.id);
                last_error = Some(e.to_string());
            }
        }
    }
    if images.is_empty() {
        return Err(PipelineError::AllSamplesFailed {
            prompt_id: entry.prompt.id.clone(),
            last_error: last_error.unwrap_or_else(|| "no samples requested".into()),
        });
    }
    Ok(images)
}

/// Answers every question about `image` and attaches its aesthetic score.
pub fn score_candidate(
    backends: &Backends,
    image: &ImageRef,
    qs: &QuestionSet,
) -> Result<ScoredCandidate, PipelineError> {
    let score = score_image(backends, image, qs, ScoringMode::Flat, UnaskedPolicy::ScoreZero)?;
    let results = score.answers.iter().map(|a| a.unwrap_or(false)).collect();
    ScoredCandidate::new(image.clone(), results, score.aesthetic)
        .map_err(|e| BackendError::protocol(crate::config::Role::Aesthetic, e.to_string()).into())
}

/// What happened to one prompt during curation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCuration {
    pub record: Option<CurationRecord>,
    pub scored: Vec<ScoredCandidate>,
    pub dropped: usize,
}

pub fn curate_prompt(
    backends: &Backends,
    entry: &CorpusEntry,
    model_version: &str,
    config: &RunConfig,
    iteration: usize,
) -> Result<PromptCuration, PipelineError> {
    let images = sample_candidates(backends, entry, model_version, config.samples_per_prompt)?;
    let mut dropped = config.samples_per_prompt - images.len();
    let mut scored = Vec::with_capacity(images.len());
    for image in &images {
        match score_candidate(backends, image, &entry.questions) {
            Ok(c) => scored.push(c),
            Err(e) => {
                log::warn!("prompt {} seed {}: scoring failed: {e}", entry.prompt.id, image.seed);
                dropped += 1;
            }
        }
    }
    if scored.is_empty() {
        return Err(PipelineError::AllSamplesFailed {
            prompt_id: entry.prompt.id.clone(),
            last_error: "no candidate could be scored".into(),
        });
    }
    let passing = filter_candidates(&scored, &config.thresholds);
    let record = select_representative(&passing).ok().map(|best| CurationRecord {
        prompt_id: entry.prompt.id.clone(),
        prompt_text: entry.prompt.text.clone(),
        selected: (*best).clone(),
        rejected_count: scored.len() - 1,
        iteration,
    });
    Ok(PromptCuration {
        record,
        scored,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub state: IterationState,
    pub dataset: Vec<CurationRecord>,
}

/// Curates one iteration over `entries` with `config.workers` prompts in flight.
pub fn curate_iteration(
    backends: &Backends,
    entries: &[&CorpusEntry],
    model_version: &str,
    config: &RunConfig,
    iteration: usize,
) -> Result<IterationResult, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<PromptCuration, PipelineError>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| curate_prompt(backends, e, model_version, config, iteration))
            .collect()
    });

    let attempted = entries.len();
    let mut dataset = Vec::new();
    let (mut failed, mut scored, mut dropped) = (0, 0, 0);
    let (mut tifa_sum, mut aes_sum) = (0.0, 0.0);
    for (entry, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(c) => {
                scored += c.scored.len();
                dropped += c.dropped;
                tifa_sum += c.scored.iter().map(|s| s.mean_score).sum::<f64>();
                aes_sum += c.scored.iter().map(|s| s.aesthetic).sum::<f64>();
                dataset.extend(c.record);
            }
            Err(e) => {
                log::warn!("prompt {} failed: {e}", entry.prompt.id);
                failed += 1;
            }
        }
    }
    if attempted > 0 && failed as f64 > config.abort_fraction * attempted as f64 {
        return Err(PipelineError::IterationAborted {
            iteration,
            failed,
            attempted,
        });
    }
    let (mean_tifa, mean_aes) = if scored > 0 {
        (tifa_sum / scored as f64, aes_sum / scored as f64)
    } else {
        (0.0, 0.0)
    };
    let state = IterationState::new(
        iteration,
        model_version,
        attempted,
        dataset.len(),
        failed,
        scored,
        dropped,
        mean_tifa.clamp(0.0, 1.0),
        mean_aes.clamp(0.0, 1.0),
    )
    .expect("counts are consistent by construction");
    Ok(IterationResult { state, dataset })
}

/// One-line progress summary for an iteration.
pub fn summary_line(state: &IterationState) -> String {
    let mut line = format!(
        "iter={} curated={}/{} pass_rate={:.4} mean={:.4} aesthetic={:.4}",
        state.index,
        state.prompts_curated,
        state.prompts_attempted,
        state.pass_rate,
        state.mean_tifa,
        state.mean_aesthetic
    );
    if let Some(eval) = state.eval_mean {
        line.push_str(&format!(" eval={eval:.4}"));
    }
    line
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub status: RunStatus,
    pub stop_reason: Option<String>,
    pub final_model_version: String,
    pub iterations: usize,
}

pub const STOP_MAX_ITERATIONS: &str = "max_iterations";
pub const STOP_CONVERGED: &str = "converged";
pub const STOP_EMPTY_DATASET: &str = "empty_dataset";

type CheckpointHook<'a> = Box<dyn FnMut(&IterationState) -> bool + Send + 'a>;

/// Drives a run to completion against a store and a set of backends.
pub struct Runner<'a> {
    store: &'a RunStore,
    backends: &'a Backends,
    config: RunConfig,
    corpus: Corpus,
    eval: Option<BenchmarkSuite>,
    on_checkpoint: Option<CheckpointHook<'a>>,
    sleep: fn(Duration),
}

impl<'a> Runner<'a> {
    pub fn new(
        store: &'a RunStore,
        backends: &'a Backends,
        config: RunConfig,
        corpus: Corpus,
    ) -> Result<Self, PipelineError> {
        let config = validate_config(config)?;
        if corpus.usable().next().is_none() {
            return Err(PipelineError::EmptyCorpus);
        }
        Ok(Runner {
            store,
            backends,
            config,
            corpus,
            eval: None,
            on_checkpoint: None,
            sleep: thread::sleep,
        })
    }

    /// Benchmarks every model version on `suite` and uses its mean score for convergence.
    pub fn with_eval_suite(mut self, suite: BenchmarkSuite) -> Self {
        self.eval = Some(suite);
        self
    }

    /// Called after each checkpoint is written; returning `false` stops the
    /// run with [`PipelineError::Interrupted`], as if the process had died.
    pub fn on_checkpoint(mut self, hook: impl FnMut(&IterationState) -> bool + Send + 'a) -> Self {
        self.on_checkpoint = Some(Box::new(hook));
        self
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_id(&self) -> String {
        self.config
            .run_id
            .clone()
            .unwrap_or_else(|| derive_run_id(&self.config))
    }

    /// Creates the run and drives it.
    pub fn start(&mut self) -> Result<RunOutcome, PipelineError> {
        let run_id = self.run_id();
        self.store.create_run(&run_id, &self.config)?;
        self.drive(&run_id)
    }

    /// Continues a run from its last checkpoint.
    pub fn resume(&mut self, run_id: &str) -> Result<RunOutcome, PipelineError> {
        let manifest = self.store.load_manifest(run_id)?;
        if manifest.status != RunStatus::Running {
            if manifest.status == RunStatus::Failed {
                log::info!("resuming failed run {run_id}");
                self.store.set_status(run_id, RunStatus::Running, None)?;
            } else {
                return Err(PipelineError::Finished {
                    run_id: run_id.to_string(),
                    status: manifest.status,
                });
            }
        }
        self.drive(run_id)
    }

    fn drive(&mut self, run_id: &str) -> Result<RunOutcome, PipelineError> {
        let _lock = self.store.lock(run_id)?;
        let result = self.drive_locked(run_id);
        if let Err(e) = &result {
            if !matches!(e, PipelineError::Interrupted { .. } | PipelineError::Store(_)) {
                self.store.set_status(run_id, RunStatus::Failed, Some(e.to_string()))?;
            }
        }
        result
    }

    fn finish(
        &self,
        run_id: &str,
        reason: &str,
        model_version: String,
        iterations: usize,
    ) -> Result<RunOutcome, PipelineError> {
        self.store
            .set_status(run_id, RunStatus::Completed, Some(reason.to_string()))?;
        log::info!("run {run_id} completed ({reason}), final model {model_version}");
        Ok(RunOutcome {
            run_id: run_id.to_string(),
            status: RunStatus::Completed,
            stop_reason: Some(reason.to_string()),
            final_model_version: model_version,
            iterations,
        })
    }

    fn drive_locked(&mut self, run_id: &str) -> Result<RunOutcome, PipelineError> {
        loop {
            let manifest = self.store.load_manifest(run_id)?;
            let done = manifest.checkpoints.len();
            let model_version = match manifest.last_checkpoint() {
                None => self.config.base_model_version.clone(),
                Some(last) => {
                    let history = self.store.history(run_id)?;
                    let state = &history[done - 1];
                    let finished_model = last
                        .finetune
                        .as_ref()
                        .filter(|f| f.status == JobStatus::Done)
                        .and_then(|f| f.result_model_version.clone());
                    match finished_model {
                        Some(next) => next,
                        None => {
                            if state.prompts_curated == 0 {
                                return self.finish(run_id, STOP_EMPTY_DATASET, state.model_version.clone(), done);
                            }
                            if done >= 2 {
                                let gain = state.convergence_metric() - history[done - 2].convergence_metric();
                                if gain < self.config.convergence_epsilon {
                                    log::info!("gain {gain:.6} below epsilon {}", self.config.convergence_epsilon);
                                    return self.finish(run_id, STOP_CONVERGED, state.model_version.clone(), done);
                                }
                            }
                            self.finetune(run_id, state, last.finetune.as_ref())?;
                            continue;
                        }
                    }
                }
            };
            if done >= self.config.max_iterations {
                if self.eval.is_some() && !manifest.reports.contains_key("final") {
                    let report = self.evaluate(&model_version)?;
                    self.store.put_report(run_id, "final", &report)?;
                }
                return self.finish(run_id, STOP_MAX_ITERATIONS, model_version, done);
            }
            let state = self.iterate(run_id, done, &model_version)?;
            log::info!("{}", summary_line(&state));
            if let Some(hook) = self.on_checkpoint.as_mut() {
                if !hook(&state) {
                    return Err(PipelineError::Interrupted { iteration: done });
                }
            }
        }
    }

    fn evaluate(&self, model_version: &str) -> Result<crate::benchmark::BenchmarkReport, PipelineError> {
        let suite = self.eval.as_ref().expect("caller checked");
        Ok(run_benchmark(self.backends, suite, model_version, self.config.workers)?)
    }

    fn iterate(&self, run_id: &str, s: usize, model_version: &str) -> Result<IterationState, PipelineError> {
        let usable: Vec<&CorpusEntry> = self.corpus.usable().collect();
        let picked = plan_iteration(
            usable.len(),
            self.config.prompts_per_iteration,
            self.config.resample_policy,
            self.config.seed,
            s,
        );
        let entries: Vec<&CorpusEntry> = picked.iter().map(|&i| usable[i]).collect();
        log::info!("iteration {s}: {} prompts from {model_version}", entries.len());
        let result = curate_iteration(self.backends, &entries, model_version, &self.config, s)?;
        self.store.put_dataset(run_id, s, &result.dataset)?;
        let mut state = result.state;
        if self.eval.is_some() {
            let report = self.evaluate(model_version)?;
            self.store.put_report(run_id, &format!("iter-{s}"), &report)?;
            state = state.with_eval_mean((report.mean_score / 100.0).clamp(0.0, 1.0));
        }
        self.store.append_checkpoint(run_id, &state)?;
        Ok(state)
    }

    fn finetune(
        &self,
        run_id: &str,
        state: &IterationState,
        existing: Option<&FinetuneRecord>,
    ) -> Result<String, PipelineError> {
        let s = state.index;
        let dataset_ref = dataset_locator(run_id, s);
        let job_id = match existing {
            Some(record) if record.status != JobStatus::Failed => record.job_id.clone(),
            _ => {
                let spec = FinetuneSpec::new(
                    self.config.finetune.clone(),
                    dataset_ref.clone(),
                    Some(state.model_version.clone()),
                )
                .map_err(|e| PipelineError::Config(InvalidConfig(e)))?;
                let job = self.backends.submit_finetune(&spec)?;
                log::info!("iteration {s}: submitted finetune job {}", job.job_id);
                self.store.record_finetune(
                    run_id,
                    s,
                    FinetuneRecord {
                        job_id: job.job_id.clone(),
                        dataset_ref: dataset_ref.clone(),
                        parent_model_version: state.model_version.clone(),
                        status: job.status,
                        result_model_version: None,
                        message: None,
                    },
                )?;
                job.job_id
            }
        };
        let record = |status, result: Option<String>, message: Option<String>| FinetuneRecord {
            job_id: job_id.clone(),
            dataset_ref: dataset_ref.clone(),
            parent_model_version: state.model_version.clone(),
            status,
            result_model_version: result,
            message,
        };
        let interval = Duration::from_millis(self.config.finetune_poll_interval_ms);
        for poll in 0..self.config.finetune_max_polls {
            match self.backends.poll_finetune(&job_id) {
                Ok(job) if job.status == JobStatus::Done => {
                    let next = job.result_model_version.expect("done jobs carry a model version");
                    self.store
                        .record_finetune(run_id, s, record(JobStatus::Done, Some(next.clone()), None))?;
                    log::info!("iteration {s}: finetune produced {next}");
                    return Ok(next);
                }
                Ok(job) => log::debug!("job {job_id} {} (poll {poll})", job.status),
                Err(BackendError::JobFailed(message)) => {
                    self.store
                        .record_finetune(run_id, s, record(JobStatus::Failed, None, Some(message.clone())))?;
                    return Err(BackendError::JobFailed(message).into());
                }
                Err(e) => return Err(e.into()),
            }
            (self.sleep)(interval);
        }
        Err(PipelineError::FinetuneTimeout {
            job_id,
            polls: self.config.finetune_max_polls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Clock;
    use crate::types::{AnswerType, Prompt, PromptCategory, PromptSource, QuestionAnswerPair, SimulatorParams};

    fn corpus(n: usize) -> Corpus {
        let entries = (0..n)
            .map(|i| {
                let prompt = Prompt::new(
                    format!("p{i}"),
                    format!("{i} red cubes on a table"),
                    PromptCategory::Counting,
                    PromptSource::Imported,
                )
                .unwrap();
                let pairs = vec![
                    QuestionAnswerPair::binary("are there cubes?", "cubes", AnswerType::Object),
                    QuestionAnswerPair::binary("are the cubes red?", "red", AnswerType::Color).with_parents(vec![0]),
                ];
                CorpusEntry::new(prompt, pairs).unwrap()
            })
            .collect();
        Corpus::new(entries).unwrap()
    }

    fn config() -> RunConfig {
        RunConfig {
            run_id: Some("unit".into()),
            prompts_per_iteration: 12,
            max_iterations: 2,
            workers: 3,
            convergence_epsilon: 0.0,
            resample_policy: ResamplePolicy::Fixed,
            finetune_poll_interval_ms: 0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn plans_are_deterministic_and_policy_shaped() {
        let a = plan_iteration(100, 10, ResamplePolicy::Fresh, 7, 1);
        assert_eq!(a, plan_iteration(100, 10, ResamplePolicy::Fresh, 7, 1));
        assert_ne!(a, plan_iteration(100, 10, ResamplePolicy::Fresh, 7, 2));
        assert_eq!(
            plan_iteration(100, 10, ResamplePolicy::Fixed, 7, 0),
            plan_iteration(100, 10, ResamplePolicy::Fixed, 7, 5)
        );
        let d0 = plan_iteration(100, 10, ResamplePolicy::Disjoint, 7, 0);
        let d1 = plan_iteration(100, 10, ResamplePolicy::Disjoint, 7, 1);
        assert!(d0.iter().all(|i| !d1.contains(i)));
        assert_eq!(plan_iteration(5, 10, ResamplePolicy::Fresh, 0, 0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn samples_follow_the_seed_ladder() {
        let backends = Backends::simulated(SimulatorParams::default());
        let c = corpus(1);
        let images = sample_candidates(&backends, &c.entries()[0], "sim-G0", 4).unwrap();
        assert_eq!(images.iter().map(|i| i.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(matches!(
            sample_candidates(&backends, &c.entries()[0], "other-model", 4),
            Err(PipelineError::AllSamplesFailed { .. })
        ));
    }

    #[test]
    fn iteration_counts_are_consistent() {
        let backends = Backends::simulated(SimulatorParams::default());
        let c = corpus(30);
        let entries: Vec<&CorpusEntry> = c.entries().iter().collect();
        let r = curate_iteration(&backends, &entries, "sim-G0", &config(), 0).unwrap();
        assert_eq!(r.state.prompts_attempted, 30);
        assert_eq!(r.state.prompts_curated, r.dataset.len());
        assert_eq!(r.state.candidates_scored, 30 * 8);
        for rec in &r.dataset {
            assert!(rec.selected.mean_score >= 0.9 && rec.selected.aesthetic >= 0.6);
        }
    }

    #[test]
    fn unknown_model_aborts_iteration() {
        let backends = Backends::simulated(SimulatorParams::default());
        let c = corpus(4);
        let entries: Vec<&CorpusEntry> = c.entries().iter().collect();
        assert!(matches!(
            curate_iteration(&backends, &entries, "elsewhere", &config(), 0),
            Err(PipelineError::IterationAborted {
                failed: 4,
                attempted: 4,
                ..
            })
        ));
    }

    #[test]
    fn run_reaches_max_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).with_clock(Clock::fixed_epoch(0));
        let backends = Backends::simulated(SimulatorParams::default());
        let outcome = Runner::new(&store, &backends, config(), corpus(20))
            .unwrap()
            .start()
            .unwrap();
        assert_eq!(outcome.stop_reason.as_deref(), Some(STOP_MAX_ITERATIONS));
        assert_eq!(outcome.final_model_version, "sim-G2");
        let manifest = store.load_manifest("unit").unwrap();
        assert_eq!(manifest.checkpoints.len(), 2);
        assert_eq!(
            manifest.checkpoints[1].finetune.as_ref().unwrap().parent_model_version,
            "sim-G1"
        );
    }

    #[test]
    fn interrupted_run_resumes_identically() {
        let backends = Backends::simulated(SimulatorParams::default());
        let full = tempfile::tempdir().unwrap();
        let store = RunStore::open(full.path()).with_clock(Clock::fixed_epoch(0));
        Runner::new(&store, &backends, config(), corpus(20))
            .unwrap()
            .start()
            .unwrap();

        let cut = tempfile::tempdir().unwrap();
        let store2 = RunStore::open(cut.path()).with_clock(Clock::fixed_epoch(0));
        let err = Runner::new(&store2, &backends, config(), corpus(20))
            .unwrap()
            .on_checkpoint(|_| false)
            .start()
            .unwrap_err();
        assert!(matches!(err, PipelineError::Interrupted { iteration: 0 }));
        Runner::new(&store2, &backends, config(), corpus(20))
            .unwrap()
            .resume("unit")
            .unwrap();
        for rel in ["manifest.json", "iterations/0/dataset.jsonl", "iterations/1/state.json"] {
            let a = std::fs::read(full.path().join("unit").join(rel)).unwrap();
            let b = std::fs::read(cut.path().join("unit").join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn empty_dataset_stops_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).with_clock(Clock::fixed_epoch(0));
        let mut cfg = config();
        cfg.thresholds.theta_aesthetic = 1.0;
        let backends = Backends::simulated(SimulatorParams::default());
        let outcome = Runner::new(&store, &backends, cfg, corpus(5)).unwrap().start().unwrap();
        assert_eq!(outcome.stop_reason.as_deref(), Some(STOP_EMPTY_DATASET));
        assert_eq!(outcome.final_model_version, "sim-G0");
    }
}
