//! End-to-end behaviour of curation, the run loop and benchmarking against
//! the in-process simulator and small scripted backends.

use std::sync::Arc;

use dreamsync::backends::{
    AestheticModel, AestheticReading, AestheticScale, BackendError, Backends, ImageGenerator, VqaModel,
};
use dreamsync::benchmark::{run_benchmark, BenchmarkSuite, SuiteName};
use dreamsync::config::{ResamplePolicy, Role};
use dreamsync::corpus::{Corpus, CorpusEntry};
use dreamsync::pipeline::{
    curate_iteration, curate_prompt, sample_candidates, score_candidate, Runner, STOP_CONVERGED, STOP_EMPTY_DATASET,
};
use dreamsync::store::{Clock, RunStatus, RunStore};
use dreamsync::{
    AnswerType, ImageRef, Prompt, PromptCategory, PromptSource, QuestionAnswerPair, RunConfig, SimulatorParams,
};

fn corpus(prompts: usize, questions: usize) -> Corpus {
    let entries = (0..prompts)
        .map(|i| {
            let prompt = Prompt::new(
                format!("p{i:04}"),
                format!("scene {i} with a lamp and a chair"),
                PromptCategory::Object,
                PromptSource::Imported,
            )
            .unwrap();
            let pairs = (0..questions)
                .map(|j| {
                    QuestionAnswerPair::binary(
                        format!("is object {j} visible?"),
                        format!("object {j}"),
                        AnswerType::Object,
                    )
                })
                .collect();
            CorpusEntry::new(prompt, pairs).unwrap()
        })
        .collect();
    Corpus::new(entries).unwrap()
}

fn params(base_fidelity: f64, gain: f64) -> SimulatorParams {
    SimulatorParams {
        base_fidelity,
        fidelity_gain_per_iteration: gain,
        ..SimulatorParams::default()
    }
}

fn config(sim: &SimulatorParams) -> RunConfig {
    RunConfig {
        run_id: Some("sim".into()),
        samples_per_prompt: 8,
        prompts_per_iteration: 40,
        max_iterations: 5,
        resample_policy: ResamplePolicy::Fixed,
        finetune_poll_interval_ms: 0,
        workers: 4,
        simulator: Some(sim.clone()),
        ..RunConfig::default()
    }
}

fn store(dir: &tempfile::TempDir) -> RunStore {
    RunStore::open(dir.path()).with_clock(Clock::fixed_epoch(1_700_000_000))
}

#[test]
fn benchmark_mean_tracks_the_simulated_fidelity() {
    let suite = BenchmarkSuite::new(SuiteName::Custom, corpus(500, 8), vec![0, 1, 2, 3]).unwrap();
    let backends = Backends::simulated(params(0.766, 0.0));
    let report = run_benchmark(&backends, &suite, "sim-G0", 8).unwrap();
    assert_eq!(report.prompts, 500);
    assert_eq!(report.per_seed.len(), 4);
    assert!((report.mean_score - 76.6).abs() <= 1.5, "mean {}", report.mean_score);
    assert!(report.absolute_score < report.mean_score);
}

#[test]
fn perfect_backend_scores_one_hundred() {
    let suite = BenchmarkSuite::new(SuiteName::Custom, corpus(30, 6), vec![0, 1]).unwrap();
    let backends = Backends::simulated(params(1.0, 0.0));
    let report = run_benchmark(&backends, &suite, "sim-G0", 4).unwrap();
    assert_eq!(report.mean_score, 100.0);
    assert_eq!(report.absolute_score, 100.0);
}

#[test]
fn zero_gain_converges_after_the_second_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(&dir);
    let sim = params(0.9, 0.0);
    let backends = Backends::simulated(sim.clone());
    let mut runner = Runner::new(&store, &backends, config(&sim), corpus(60, 8)).unwrap();
    let outcome = runner.start().unwrap();
    assert_eq!(outcome.stop_reason.as_deref(), Some(STOP_CONVERGED));
    assert_eq!(outcome.status, RunStatus::Completed);
    assert_eq!(outcome.iterations, 2);
    let history = store.history("sim").unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(history[0].mean_tifa, history[1].mean_tifa);
}

#[test]
fn unaligned_model_empties_the_dataset_without_aborting() {
    let sim = params(0.01, 0.0);
    let backends = Backends::simulated(sim.clone());
    let corpus = corpus(40, 8);
    let entries: Vec<&CorpusEntry> = corpus.entries().iter().collect();
    let result = curate_iteration(&backends, &entries, "sim-G0", &config(&sim), 0).unwrap();
    assert!(result.dataset.is_empty());
    assert_eq!(result.state.pass_rate, 0.0);
    assert_eq!(result.state.prompts_failed, 0);
    assert_eq!(result.state.candidates_scored, 40 * 8);

    let dir = tempfile::tempdir().unwrap();
    let store = store(&dir);
    let outcome = Runner::new(&store, &backends, config(&sim), corpus)
        .unwrap()
        .start()
        .unwrap();
    assert_eq!(outcome.stop_reason.as_deref(), Some(STOP_EMPTY_DATASET));
    assert_eq!(outcome.iterations, 1);
    assert_eq!(outcome.final_model_version, "sim-G0");
}

/// Delegates to the simulator except for the listed seeds.
struct FailingSeeds {
    inner: Arc<dyn ImageGenerator>,
    failing: Vec<u64>,
}

impl ImageGenerator for FailingSeeds {
    fn generate(&self, prompt: &Prompt, seed: u64, model_version: &str) -> Result<ImageRef, BackendError> {
        if self.failing.contains(&seed) {
            return Err(BackendError::Unavailable {
                role: Role::Generator,
                attempts: 3,
                message: "connection refused".into(),
            });
        }
        self.inner.generate(prompt, seed, model_version)
    }
}

#[test]
fn failed_generations_are_skipped() {
    let mut backends = Backends::simulated(SimulatorParams::default());
    backends.generator = Arc::new(FailingSeeds {
        inner: backends.generator.clone(),
        failing: vec![1, 4, 6],
    });
    let corpus = corpus(1, 4);
    let entry = &corpus.entries()[0];
    let refs = sample_candidates(&backends, entry, "sim-G0", 8).unwrap();
    assert_eq!(refs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 2, 3, 5, 7]);

    let sim = SimulatorParams::default();
    let curation = curate_prompt(&backends, entry, "sim-G0", &config(&sim), 0).unwrap();
    assert_eq!(curation.scored.len(), 5);
    assert_eq!(curation.dropped, 3);
}

/// Correct on the first `correct` questions of every image, or only on images of `only_seed`.
struct ScriptedVqa {
    correct: usize,
    only_seed: Option<u64>,
}

impl VqaModel for ScriptedVqa {
    fn answer(&self, image: &ImageRef, pair: &QuestionAnswerPair) -> Result<String, BackendError> {
        let index: usize = pair.question.split(' ').nth(2).unwrap().parse().unwrap();
        let right = match self.only_seed {
            Some(seed) => image.seed == seed,
            None => index < self.correct,
        };
        Ok(if right { pair.answer.clone() } else { "no".into() })
    }
}

struct FixedAesthetic(Option<f64>);

impl AestheticModel for FixedAesthetic {
    fn score(&self, _: &ImageRef) -> Result<AestheticReading, BackendError> {
        match self.0 {
            Some(score) => Ok(AestheticReading {
                score,
                scale: AestheticScale::Unit,
            }),
            None => Err(BackendError::Unavailable {
                role: Role::Aesthetic,
                attempts: 3,
                message: "down".into(),
            }),
        }
    }
}

#[test]
fn scoring_combines_vqa_and_aesthetic() {
    let mut backends = Backends::simulated(SimulatorParams::default());
    backends.vqa = Arc::new(ScriptedVqa {
        correct: 7,
        only_seed: None,
    });
    backends.aesthetic = Arc::new(FixedAesthetic(Some(0.72)));
    let corpus = corpus(1, 10);
    let image = ImageRef::new("sim://x", 0, "sim-G0").unwrap();
    let c = score_candidate(&backends, &image, &corpus.entries()[0].questions).unwrap();
    assert_eq!(c.mean_score, 0.7);
    assert_eq!(c.absolute_score, 0);
    assert_eq!(c.aesthetic, 0.72);
}

/// Aesthetic service that is down for one seed.
struct FlakyAesthetic(u64);

impl AestheticModel for FlakyAesthetic {
    fn score(&self, image: &ImageRef) -> Result<AestheticReading, BackendError> {
        FixedAesthetic((image.seed != self.0).then_some(0.7)).score(image)
    }
}

#[test]
fn aesthetic_outage_drops_candidates() {
    let sim = SimulatorParams::default();
    let corpus = corpus(1, 4);
    let entry = &corpus.entries()[0];

    let mut backends = Backends::simulated(sim.clone());
    backends.aesthetic = Arc::new(FlakyAesthetic(2));
    let curation = curate_prompt(&backends, entry, "sim-G0", &config(&sim), 0).unwrap();
    assert_eq!(curation.scored.len(), 7);
    assert_eq!(curation.dropped, 1);
    assert!(curation.scored.iter().all(|c| c.image.seed != 2));

    backends.aesthetic = Arc::new(FixedAesthetic(None));
    let err = curate_prompt(&backends, entry, "sim-G0", &config(&sim), 0).unwrap_err();
    assert!(err.to_string().contains("no candidate could be scored"), "{err}");
}

#[test]
fn single_passing_candidate_is_the_whole_dataset() {
    let mut backends = Backends::simulated(SimulatorParams::default());
    backends.vqa = Arc::new(ScriptedVqa {
        correct: 0,
        only_seed: Some(5),
    });
    backends.aesthetic = Arc::new(FixedAesthetic(Some(0.8)));
    let corpus = corpus(1, 4);
    let entries: Vec<&CorpusEntry> = corpus.entries().iter().collect();
    let sim = SimulatorParams::default();
    let result = curate_iteration(&backends, &entries, "sim-G0", &config(&sim), 0).unwrap();
    assert_eq!(result.dataset.len(), 1);
    let record = &result.dataset[0];
    assert_eq!(record.prompt_text, "scene 0 with a lamp and a chair");
    assert_eq!(record.selected.image.seed, 5);
    assert_eq!(record.selected.mean_score, 1.0);
    assert_eq!(record.rejected_count, 7);
    assert_eq!(result.state.pass_rate, 1.0);
}
