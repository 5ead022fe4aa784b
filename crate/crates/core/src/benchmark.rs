//! Multi-seed evaluation of a model version against a question-annotated corpus.
//!
//! Reports are on a ×100 scale and rendered with one decimal.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backends::{BackendError, Backends};
use crate::corpus::{Corpus, CorpusEntry};
use crate::decimal;
use crate::scoring::{grade_dependency_graph, topological_order, ScoringError, UnaskedPolicy};
use crate::types::{ImageRef, QuestionSet};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Fraction of failing prompts above which a benchmark is abandoned.
pub const ABORT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    #[default]
    Tifa,
    Dsg1k,
    Custom,
}

impl SuiteName {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteName::Tifa => "tifa",
            SuiteName::Dsg1k => "dsg1k",
            SuiteName::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Every question asked; mean and absolute score over all answers.
    Flat,
    /// Questions asked only when their parents were answered correctly.
    Dependency,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("invalid suite: {0}")]
    InvalidSuite(String),
    #[error("benchmark aborted: {failed} of {total} prompts failed")]
    BenchmarkAborted { failed: usize, total: usize },
    #[error("reports come from different suites ({expected} vs {found})")]
    SuiteMismatch { expected: String, found: String },
    #[error("non-finite preference score for prompt {prompt_id}")]
    NaNScore { prompt_id: String },
    #[error("nothing to compare")]
    NoReports,
    #[error("no preference scores given")]
    NoScores,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub name: SuiteName,
    pub corpus: Corpus,
    pub eval_seeds: Vec<u64>,
    pub mode: ScoringMode,
    pub unasked_policy: UnaskedPolicy,
}

impl BenchmarkSuite {
    /// DSG suites grade with dependencies; the others grade flat.
    pub fn new(name: SuiteName, corpus: Corpus, eval_seeds: Vec<u64>) -> Result<Self, BenchmarkError> {
        let mode = if name == SuiteName::Dsg1k {
            ScoringMode::Dependency
        } else {
            ScoringMode::Flat
        };
        let suite = BenchmarkSuite {
            name,
            corpus,
            eval_seeds,
            mode,
            unasked_policy: UnaskedPolicy::default(),
        };
        suite.check()?;
        Ok(suite)
    }

    pub fn with_mode(mut self, mode: ScoringMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_unasked_policy(mut self, policy: UnaskedPolicy) -> Self {
        self.unasked_policy = policy;
        self
    }

    fn check(&self) -> Result<(), BenchmarkError> {
        if self.corpus.usable().next().is_none() {
            return Err(BenchmarkError::InvalidSuite(
                "corpus has no prompt with questions".into(),
            ));
        }
        if self.eval_seeds.is_empty() {
            return Err(BenchmarkError::InvalidSuite("eval_seeds must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        if !self.eval_seeds.iter().all(|s| seen.insert(*s)) {
            return Err(BenchmarkError::InvalidSuite("eval_seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Identifies the corpus, seeds and grading rules.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.corpus.to_jsonl().as_bytes());
        hasher.update(serde_json::to_vec(&(&self.eval_seeds, self.mode, self.unasked_policy)).expect("serializes"));
        hex::encode(&hasher.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    #[serde(with = "decimal")]
    pub mean_score: f64,
    #[serde(with = "decimal")]
    pub absolute_score: f64,
    #[serde(with = "decimal")]
    pub aesthetic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub questions: usize,
    #[serde(with = "decimal")]
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub suite: SuiteName,
    pub suite_fingerprint: String,
    pub mode: ScoringMode,
    pub model_version: String,
    pub prompts: usize,
    pub prompts_failed: usize,
    pub eval_seeds: Vec<u64>,
    #[serde(with = "decimal")]
    pub mean_score: f64,
    #[serde(with = "decimal")]
    pub absolute_score: f64,
    #[serde(with = "decimal")]
    pub aesthetic: f64,
    /// Population standard deviation of the per-seed mean scores.
    #[serde(with = "decimal")]
    pub mean_score_stddev: f64,
    pub per_seed: Vec<SeedSummary>,
    pub categories: BTreeMap<String, CategoryScore>,
    #[serde(with = "decimal::option", default, skip_serializing_if = "Option::is_none")]
    pub external_preference: Option<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl BenchmarkReport {
    pub fn with_external_preference(mut self, summary: &PreferenceSummary) -> Self {
        self.external_preference = Some(decimal::quantize(summary.mean));
        self
    }

    fn suite_key(&self) -> String {
        format!("{}:{}", self.suite.as_str(), self.suite_fingerprint)
    }
}

/// Grades of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub mean: f64,
    pub absolute: bool,
    pub aesthetic: f64,
    /// `None` marks a question that was not asked.
    pub answers: Vec<Option<bool>>,
}

/// Queries the VQA role for one image, honouring dependencies in `Dependency` mode.
pub fn score_image(
    backends: &Backends,
    image: &ImageRef,
    qs: &QuestionSet,
    mode: ScoringMode,
    policy: UnaskedPolicy,
) -> Result<ImageScore, BenchmarkError> {
    let parents = match mode {
        ScoringMode::Flat => vec![Vec::new(); qs.len()],
        ScoringMode::Dependency => qs.parents(),
    };
    let mut answers: Vec<Option<bool>> = vec![None; qs.len()];
    for j in topological_order(&parents)? {
        if parents[j].iter().all(|&p| answers[p] == Some(true)) {
            let verdict = backends.answer_question(image, &qs.pairs[j])?;
            answers[j] = Some(verdict.is_correct());
        }
    }
    let grade = grade_dependency_graph(&parents, &answers, policy)?;
    let aesthetic = backends.score_aesthetic(image)?;
    Ok(ImageScore {
        mean: grade.score,
        absolute: grade.all_correct(),
        aesthetic,
        answers,
    })
}

struct PromptOutcome {
    per_seed: Vec<ImageScore>,
}

fn evaluate_prompt(
    backends: &Backends,
    suite: &BenchmarkSuite,
    entry: &CorpusEntry,
    model_version: &str,
) -> Result<PromptOutcome, String> {
    let mut per_seed = Vec::with_capacity(suite.eval_seeds.len());
    for &seed in &suite.eval_seeds {
        let image = backends
            .generate_image(&entry.prompt, seed, model_version)
            .map_err(|e| e.to_string())?;
        let score = score_image(backends, &image, &entry.questions, suite.mode, suite.unasked_policy)
            .map_err(|e| e.to_string())?;
        per_seed.push(score);
    }
    Ok(PromptOutcome { per_seed })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn pct(x: f64) -> f64 {
    decimal::quantize(100.0 * x)
}

/// Generates one image per (prompt, eval seed) and aggregates scores across
/// prompts within each seed, then across seeds.
pub fn run_benchmark(
    backends: &Backends,
    suite: &BenchmarkSuite,
    model_version: &str,
    workers: usize,
) -> Result<BenchmarkReport, BenchmarkError> {
    suite.check()?;
    let entries: Vec<&CorpusEntry> = suite.corpus.usable().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchmarkError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<PromptOutcome, String>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| evaluate_prompt(backends, suite, e, model_version))
            .collect()
    });

    let total = entries.len();
    let mut ok = Vec::new();
    let mut failed = 0;
    for (entry, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(o) => ok.push((*entry, o)),
            Err(e) => {
                log::warn!("benchmark prompt {} failed: {e}", entry.prompt.id);
                failed += 1;
            }
        }
    }
    if failed as f64 > ABORT_FRACTION * total as f64 || ok.is_empty() {
        return Err(BenchmarkError::BenchmarkAborted { failed, total });
    }

    let per_seed: Vec<SeedSummary> = suite
        .eval_seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| SeedSummary {
            seed,
            mean_score: pct(mean(ok.iter().map(|(_, o)| o.per_seed[i].mean))),
            absolute_score: pct(mean(ok.iter().map(|(_, o)| o.per_seed[i].absolute as u8 as f64))),
            aesthetic: pct(mean(ok.iter().map(|(_, o)| o.per_seed[i].aesthetic))),
        })
        .collect();

    let seed_means: Vec<f64> = suite
        .eval_seeds
        .iter()
        .enumerate()
        .map(|(i, _)| mean(ok.iter().map(|(_, o)| o.per_seed[i].mean)))
        .collect();
    let overall = mean(seed_means.iter().copied());
    let variance = mean(seed_means.iter().map(|m| (m - overall).powi(2)));

    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (entry, outcome) in &ok {
        for score in &outcome.per_seed {
            for (pair, answer) in entry.questions.pairs.iter().zip(&score.answers) {
                let key = pair
                    .category
                    .clone()
                    .unwrap_or_else(|| pair.answer_type.as_str().to_string());
                let tally = tallies.entry(key).or_default();
                match (answer, suite.unasked_policy) {
                    (None, UnaskedPolicy::Exclude) => {}
                    _ => {
                        tally.0 += 1;
                        tally.1 += (*answer == Some(true)) as usize;
                    }
                }
            }
        }
    }
    let categories = tallies
        .into_iter()
        .map(|(k, (n, hits))| {
            let accuracy = if n == 0 { 0.0 } else { pct(hits as f64 / n as f64) };
            (k, CategoryScore { questions: n, accuracy })
        })
        .collect();

    let n_seeds = suite.eval_seeds.len();
    Ok(BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        suite: suite.name,
        suite_fingerprint: suite.fingerprint(),
        mode: suite.mode,
        model_version: model_version.to_string(),
        prompts: ok.len(),
        prompts_failed: failed,
        eval_seeds: suite.eval_seeds.clone(),
        mean_score: pct(overall),
        absolute_score: pct(mean(
            (0..n_seeds).map(|i| mean(ok.iter().map(|(_, o)| o.per_seed[i].absolute as u8 as f64))),
        )),
        aesthetic: pct(mean(
            (0..n_seeds).map(|i| mean(ok.iter().map(|(_, o)| o.per_seed[i].aesthetic))),
        )),
        mean_score_stddev: pct(variance.sqrt()),
        per_seed,
        categories,
        external_preference: None,
        extra: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceSummary {
    pub count: usize,
    pub mean: f64,
}

/// Averages externally produced preference scores (logits; may be negative).
pub fn ingest_preference_scores(records: &[(String, f64)]) -> Result<PreferenceSummary, BenchmarkError> {
    if records.is_empty() {
        return Err(BenchmarkError::NoScores);
    }
    let mut sum = 0.0;
    for (prompt_id, score) in records {
        if !score.is_finite() {
            return Err(BenchmarkError::NaNScore {
                prompt_id: prompt_id.clone(),
            });
        }
        sum += score;
    }
    Ok(PreferenceSummary {
        count: records.len(),
        mean: sum / records.len() as f64,
    })
}

/// Value rounded to the one-decimal display precision.
pub fn display_round(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Signed one-decimal delta (`+1.0`, `-0.3`, `+0.0`).
pub fn format_delta(delta: f64) -> String {
    let s = format!("{:+.1}", delta);
    if s == "-0.0" {
        "+0.0".to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCell {
    pub value: f64,
    /// Difference to the baseline's displayed value; absent on the baseline row.
    pub delta: Option<f64>,
}

impl MetricCell {
    fn new(value: f64, baseline: Option<f64>) -> Self {
        let shown = display_round(value);
        MetricCell {
            value: shown,
            delta: baseline.map(|b| shown - display_round(b)),
        }
    }

    pub fn delta_text(&self) -> Option<String> {
        self.delta.map(format_delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model_version: String,
    pub mean_score: MetricCell,
    pub absolute_score: MetricCell,
    pub aesthetic: MetricCell,
    pub external_preference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub suite: SuiteName,
    pub rows: Vec<ComparisonRow>,
}

/// Deltas of every report against the first (the baseline).
pub fn compare_models(reports: &[BenchmarkReport]) -> Result<Comparison, BenchmarkError> {
    let base = reports.first().ok_or(BenchmarkError::NoReports)?;
    for r in &reports[1..] {
        if r.suite_key() != base.suite_key() {
            return Err(BenchmarkError::SuiteMismatch {
                expected: base.suite_key(),
                found: r.suite_key(),
            });
        }
    }
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let b = (i > 0).then_some(base);
            ComparisonRow {
                model_version: r.model_version.clone(),
                mean_score: MetricCell::new(r.mean_score, b.map(|b| b.mean_score)),
                absolute_score: MetricCell::new(r.absolute_score, b.map(|b| b.absolute_score)),
                aesthetic: MetricCell::new(r.aesthetic, b.map(|b| b.aesthetic)),
                external_preference: r.external_preference,
            }
        })
        .collect();
    Ok(Comparison {
        suite: base.suite,
        rows,
    })
}

/// Plain-text table: one row per model, deltas in parentheses.
pub fn render_table(comparison: &Comparison) -> String {
    let with_pref = comparison.rows.iter().any(|r| r.external_preference.is_some());
    let cell = |c: &MetricCell| match c.delta_text() {
        Some(d) => format!("{:.1} ({d})", c.value),
        None => format!("{:.1}", c.value),
    };
    let mut header = vec![
        "model".to_string(),
        "mean".into(),
        "absolute".into(),
        "aesthetic".into(),
    ];
    if with_pref {
        header.push("preference".into());
    }
    let mut rows = vec![header];
    for r in &comparison.rows {
        let mut row = vec![
            r.model_version.clone(),
            cell(&r.mean_score),
            cell(&r.absolute_score),
            cell(&r.aesthetic),
        ];
        if with_pref {
            row.push(r.external_preference.map_or("-".into(), |p| format!("{p:.3}")));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("suite: {}\n", comparison.suite.as_str());
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (text, w))| {
                if c == 0 {
                    format!("{text:<w$}")
                } else {
                    format!("{text:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mean_score: f64, absolute: f64, aesthetic: f64) -> BenchmarkReport {
        BenchmarkReport {
            schema_version: REPORT_SCHEMA_VERSION,
            suite: SuiteName::Tifa,
            suite_fingerprint: "f".into(),
            mode: ScoringMode::Flat,
            model_version: "m".into(),
            prompts: 1,
            prompts_failed: 0,
            eval_seeds: vec![0, 1, 2, 3],
            mean_score,
            absolute_score: absolute,
            aesthetic,
            mean_score_stddev: 0.0,
            per_seed: Vec::new(),
            categories: BTreeMap::new(),
            external_preference: None,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn deltas_match_published_presentation() {
        let c = compare_models(&[report(76.6, 45.5, 60.9), report(77.6, 49.2, 60.9)]).unwrap();
        assert_eq!(c.rows[0].mean_score.delta_text(), None);
        assert_eq!(c.rows[1].mean_score.delta_text().unwrap(), "+1.0");
        assert_eq!(c.rows[1].absolute_score.delta_text().unwrap(), "+3.7");
        assert_eq!(c.rows[1].aesthetic.delta_text().unwrap(), "+0.0");
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let r = report(70.25, 40.0, 55.0);
        let c = compare_models(&[r.clone(), r]).unwrap();
        for cell in [&c.rows[1].mean_score, &c.rows[1].absolute_score, &c.rows[1].aesthetic] {
            assert_eq!(cell.delta_text().unwrap(), "+0.0");
        }
    }

    #[test]
    fn negative_deltas_and_mismatched_suites() {
        let c = compare_models(&[report(50.0, 10.0, 60.0), report(49.7, 10.0, 60.0)]).unwrap();
        assert_eq!(c.rows[1].mean_score.delta_text().unwrap(), "-0.3");
        let mut other = report(1.0, 1.0, 1.0);
        other.suite = SuiteName::Dsg1k;
        assert!(matches!(
            compare_models(&[report(1.0, 1.0, 1.0), other]),
            Err(BenchmarkError::SuiteMismatch { .. })
        ));
        assert!(matches!(compare_models(&[]), Err(BenchmarkError::NoReports)));
    }

    #[test]
    fn table_renders_signed_deltas() {
        let c = compare_models(&[report(76.6, 45.5, 60.9), report(77.6, 49.2, 62.0)]).unwrap();
        let table = render_table(&c);
        assert!(table.contains("77.6 (+1.0)"), "{table}");
        assert!(table.contains("49.2 (+3.7)"), "{table}");
        assert!(table.contains("62.0 (+1.1)"), "{table}");
        let single = render_table(&compare_models(&[report(76.6, 45.5, 60.9)]).unwrap());
        assert!(!single.contains('('));
    }

    #[test]
    fn preference_ingestion() {
        let same: Vec<_> = (0..10).map(|i| (format!("p{i}"), 0.878)).collect();
        assert!((ingest_preference_scores(&same).unwrap().mean - 0.878).abs() < 1e-12);
        let mixed = vec![("a".to_string(), -0.22), ("b".to_string(), 0.22)];
        assert_eq!(ingest_preference_scores(&mixed).unwrap().mean, 0.0);
        let bad = vec![("a".to_string(), f64::NAN)];
        assert!(matches!(
            ingest_preference_scores(&bad),
            Err(BenchmarkError::NaNScore { .. })
        ));
        assert!(matches!(ingest_preference_scores(&[]), Err(BenchmarkError::NoScores)));
    }

    #[test]
    fn report_round_trips() {
        let mut r = report(76.6, 45.5, 60.9);
        r.external_preference = Some(-0.25);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"mean_score\":\"76.600000\""));
        assert_eq!(serde_json::from_str::<BenchmarkReport>(&text).unwrap(), r);
    }
}
