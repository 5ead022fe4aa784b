//! Domain types shared by every stage of the engine.
//!
//! All types validate their invariants on construction and on
//! deserialization (via `try_from` raw mirrors), so a value that exists is a
//! value that is valid. Nothing here holds pixel data: images are only ever
//! referenced through opaque [`ImageRef`] locators.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decimal;

/// One failed invariant, addressed by field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

/// Every invariant a value violated, not just the first.
#[derive(Debug, Clone, PartialEq, Eq, Default, thiserror::Error)]
#[error("{}", render_violations(&self.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn render_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("{}: {}", v.field, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ValidationError {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(field: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = Self::new();
        e.push(field, message);
        e
    }

    pub fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    /// Re-home nested violations under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ValidationError) {
        for v in other.violations {
            self.violations.push(Violation {
                field: format!("{prefix}.{}", v.field),
                message: v.message,
            });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result<T>(self, value: T) -> Result<T, ValidationError> {
        if self.is_empty() {
            Ok(value)
        } else {
            Err(self)
        }
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field.starts_with(field))
    }
}

fn in_unit_interval(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let needle = s.trim().to_ascii_lowercase();
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == needle)
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name)))
            }
        }
    };
}

string_enum! {
    /// The twelve prompt categories used to steer prompt generation.
    PromptCategory {
        Spatial => "spatial",
        Counting => "counting",
        Food => "food",
        AnimalHuman => "animal/human",
        Activity => "activity",
        Object => "object",
        Color => "color",
        Material => "material",
        Shape => "shape",
        Location => "location",
        Attribute => "attribute",
        Other => "other",
    }
}

string_enum! {
    /// Semantic type of the concept a question probes. A superset of the
    /// prompt categories (adds human/animal split and `existence`).
    AnswerType {
        Object => "object",
        Human => "human",
        Animal => "animal",
        Food => "food",
        Activity => "activity",
        Attribute => "attribute",
        Counting => "counting",
        Color => "color",
        Material => "material",
        Spatial => "spatial",
        Location => "location",
        Shape => "shape",
        Existence => "existence",
        Other => "other",
    }
}

string_enum! {
    PromptSource {
        Generated => "generated",
        Imported => "imported",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PromptRaw")]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub category: PromptCategory,
    pub source: PromptSource,
}

#[derive(Deserialize)]
struct PromptRaw {
    id: String,
    text: String,
    category: PromptCategory,
    #[serde(default = "default_source")]
    source: PromptSource,
}

fn default_source() -> PromptSource {
    PromptSource::Imported
}

impl TryFrom<PromptRaw> for Prompt {
    type Error = ValidationError;

    fn try_from(raw: PromptRaw) -> Result<Self, Self::Error> {
        Prompt::new(raw.id, raw.text, raw.category, raw.source)
    }
}

impl Prompt {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        category: PromptCategory,
        source: PromptSource,
    ) -> Result<Self, ValidationError> {
        let (id, text) = (id.into(), text.into());
        let mut errors = ValidationError::new();
        if id.trim().is_empty() {
            errors.push("id", "must be non-empty");
        }
        if text.trim().is_empty() {
            errors.push("text", "must be non-empty");
        }
        errors.into_result(Prompt {
            id,
            text,
            category,
            source,
        })
    }
}

/// One multiple-choice probe `(Q_j, A_j)` derived from a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuestionAnswerPairRaw")]
pub struct QuestionAnswerPair {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: String,
    pub answer_source: String,
    pub answer_type: AnswerType,
    /// Indices of parent questions (dependency-aware mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<usize>,
    /// Optional benchmark category label (e.g. `entity`, `relation`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Deserialize)]
struct QuestionAnswerPairRaw {
    question: String,
    choices: Vec<String>,
    answer: String,
    #[serde(default)]
    answer_source: String,
    answer_type: AnswerType,
    #[serde(default)]
    depends_on: Vec<usize>,
    #[serde(default)]
    category: Option<String>,
}

impl TryFrom<QuestionAnswerPairRaw> for QuestionAnswerPair {
    type Error = ValidationError;

    fn try_from(raw: QuestionAnswerPairRaw) -> Result<Self, Self::Error> {
        let mut pair = QuestionAnswerPair::new(
            raw.question,
            raw.choices,
            raw.answer,
            raw.answer_source,
            raw.answer_type,
        )?;
        pair.depends_on = raw.depends_on;
        pair.category = raw.category;
        Ok(pair)
    }
}

impl QuestionAnswerPair {
    pub fn new(
        question: impl Into<String>,
        choices: Vec<String>,
        answer: impl Into<String>,
        answer_source: impl Into<String>,
        answer_type: AnswerType,
    ) -> Result<Self, ValidationError> {
        let (question, answer) = (question.into(), answer.into());
        let mut errors = ValidationError::new();
        if question.trim().is_empty() {
            errors.push("question", "must be non-empty");
        }
        if choices.len() < 2 {
            errors.push("choices", "needs at least 2 choices");
        }
        let mut seen = HashSet::new();
        if choices.iter().any(|c| !seen.insert(c.as_str())) {
            errors.push("choices", "choices must be distinct");
        }
        if !choices.contains(&answer) {
            errors.push("answer", format!("{answer:?} is not one of the choices"));
        }
        errors.into_result(QuestionAnswerPair {
            question,
            choices,
            answer,
            answer_source: answer_source.into(),
            answer_type,
            depends_on: Vec::new(),
            category: None,
        })
    }

    pub fn with_parents(mut self, parents: Vec<usize>) -> Self {
        self.depends_on = parents;
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    /// Yes/no question with answer `yes`.
    pub fn binary(question: impl Into<String>, answer_source: impl Into<String>, answer_type: AnswerType) -> Self {
        QuestionAnswerPair::new(
            question,
            vec!["yes".into(), "no".into()],
            "yes",
            answer_source,
            answer_type,
        )
        .expect("binary pair is valid by construction")
    }
}

/// The `N_T` question-answer pairs belonging to one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuestionSetRaw")]
pub struct QuestionSet {
    pub prompt_id: String,
    pub pairs: Vec<QuestionAnswerPair>,
}

#[derive(Deserialize)]
struct QuestionSetRaw {
    prompt_id: String,
    pairs: Vec<QuestionAnswerPair>,
}

impl TryFrom<QuestionSetRaw> for QuestionSet {
    type Error = ValidationError;

    fn try_from(raw: QuestionSetRaw) -> Result<Self, Self::Error> {
        QuestionSet::new(raw.prompt_id, raw.pairs)
    }
}

impl QuestionSet {
    /// An empty set is representable (a prompt whose QA generation yielded
    /// nothing); use [`QuestionSet::ensure_usable`] before scoring.
    pub fn new(prompt_id: impl Into<String>, pairs: Vec<QuestionAnswerPair>) -> Result<Self, ValidationError> {
        let prompt_id = prompt_id.into();
        let mut errors = ValidationError::new();
        if prompt_id.trim().is_empty() {
            errors.push("prompt_id", "must be non-empty");
        }
        let mut seen = HashSet::new();
        for (i, pair) in pairs.iter().enumerate() {
            if !seen.insert(pair.question.as_str()) {
                errors.push(format!("pairs[{i}].question"), "duplicate question text");
            }
            let mut parents = HashSet::new();
            for &p in &pair.depends_on {
                if p >= i {
                    errors.push(
                        format!("pairs[{i}].depends_on"),
                        format!("parent {p} must reference an earlier question"),
                    );
                }
                if !parents.insert(p) {
                    errors.push(format!("pairs[{i}].depends_on"), format!("parent {p} listed twice"));
                }
            }
        }
        errors.into_result(QuestionSet { prompt_id, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_dependencies(&self) -> bool {
        self.pairs.iter().any(|p| !p.depends_on.is_empty())
    }

    pub fn parents(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.depends_on.clone()).collect()
    }

    pub fn ensure_usable(&self) -> Result<(), ValidationError> {
        if self.pairs.is_empty() {
            Err(ValidationError::single("pairs", "question set needs at least one pair"))
        } else {
            Ok(())
        }
    }
}

/// Opaque locator for one generated image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ImageRefRaw")]
pub struct ImageRef {
    pub uri: String,
    pub seed: u64,
    pub model_version: String,
}

#[derive(Deserialize)]
struct ImageRefRaw {
    uri: String,
    seed: u64,
    model_version: String,
}

impl TryFrom<ImageRefRaw> for ImageRef {
    type Error = ValidationError;

    fn try_from(raw: ImageRefRaw) -> Result<Self, Self::Error> {
        ImageRef::new(raw.uri, raw.seed, raw.model_version)
    }
}

impl ImageRef {
    pub fn new(uri: impl Into<String>, seed: u64, model_version: impl Into<String>) -> Result<Self, ValidationError> {
        let (uri, model_version) = (uri.into(), model_version.into());
        let mut errors = ValidationError::new();
        if uri.trim().is_empty() {
            errors.push("uri", "must be non-empty");
        }
        if model_version.trim().is_empty() {
            errors.push("model_version", "must be non-empty");
        }
        errors.into_result(ImageRef {
            uri,
            seed,
            model_version,
        })
    }
}

/// One candidate image with its faithfulness results and aesthetic score.
///
/// `mean_score` and `absolute_score` are derived from `results` and are
/// re-derived (and cross-checked) when read back from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoredCandidateRaw")]
pub struct ScoredCandidate {
    pub image: ImageRef,
    pub results: Vec<bool>,
    #[serde(with = "decimal")]
    pub mean_score: f64,
    pub absolute_score: u8,
    #[serde(with = "decimal")]
    pub aesthetic: f64,
}

#[derive(Deserialize)]
struct ScoredCandidateRaw {
    image: ImageRef,
    results: Vec<bool>,
    #[serde(with = "decimal")]
    mean_score: f64,
    absolute_score: u8,
    #[serde(with = "decimal")]
    aesthetic: f64,
}

impl TryFrom<ScoredCandidateRaw> for ScoredCandidate {
    type Error = ValidationError;

    fn try_from(raw: ScoredCandidateRaw) -> Result<Self, Self::Error> {
        let candidate = ScoredCandidate::new(raw.image, raw.results, raw.aesthetic)?;
        let mut errors = ValidationError::new();
        if decimal::format(candidate.mean_score) != decimal::format(raw.mean_score) {
            errors.push("mean_score", "does not match results");
        }
        if candidate.absolute_score != raw.absolute_score {
            errors.push("absolute_score", "does not match results");
        }
        errors.into_result(candidate)
    }
}

impl ScoredCandidate {
    pub fn new(image: ImageRef, results: Vec<bool>, aesthetic: f64) -> Result<Self, ValidationError> {
        let mut errors = ValidationError::new();
        if !in_unit_interval(aesthetic) {
            errors.push("aesthetic", format!("{aesthetic} outside [0, 1]"));
        }
        let mean = crate::scoring::mean_score(&results);
        let absolute = crate::scoring::absolute_score(&results);
        match (mean, absolute) {
            (Ok(mean_score), Ok(absolute_score)) if errors.is_empty() => Ok(ScoredCandidate {
                image,
                results,
                mean_score,
                absolute_score,
                aesthetic: decimal::quantize(aesthetic),
            }),
            (Err(e), _) | (_, Err(e)) => {
                errors.push("results", e.to_string());
                Err(errors)
            }
            _ => Err(errors),
        }
    }

    pub fn seed(&self) -> u64 {
        self.image.seed
    }
}

/// `(θ_faithful, θ_aesthetic)` for the dual-threshold filter.
///
/// Deserializes leniently so config validation can report every bad field
/// at once; [`FilterThresholds::new`] and `validate_config` enforce the range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub theta_faithful: f64,
    pub theta_aesthetic: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            theta_faithful: 0.9,
            theta_aesthetic: 0.6,
        }
    }
}

impl FilterThresholds {
    pub fn new(theta_faithful: f64, theta_aesthetic: f64) -> Result<Self, ValidationError> {
        let t = FilterThresholds {
            theta_faithful,
            theta_aesthetic,
        };
        t.check().into_result(t)
    }

    pub fn check(&self) -> ValidationError {
        let mut errors = ValidationError::new();
        if !in_unit_interval(self.theta_faithful) {
            errors.push("theta_faithful", format!("{} outside [0, 1]", self.theta_faithful));
        }
        if !in_unit_interval(self.theta_aesthetic) {
            errors.push("theta_aesthetic", format!("{} outside [0, 1]", self.theta_aesthetic));
        }
        errors
    }

    pub fn admits(&self, candidate: &ScoredCandidate) -> bool {
        candidate.mean_score >= self.theta_faithful && candidate.aesthetic >= self.theta_aesthetic
    }
}

/// One `(T, Î_T)` pair of a curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub prompt_id: String,
    pub prompt_text: String,
    pub selected: ScoredCandidate,
    pub rejected_count: usize,
    pub iteration: usize,
}

/// `D(G_s)`: at most one record per prompt.
pub type CuratedDataset = Vec<CurationRecord>;

/// Bookkeeping for one self-training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IterationStateRaw")]
pub struct IterationState {
    pub schema_version: u32,
    pub index: usize,
    pub model_version: String,
    pub prompts_attempted: usize,
    pub prompts_curated: usize,
    pub prompts_failed: usize,
    pub candidates_scored: usize,
    pub candidates_dropped: usize,
    #[serde(with = "decimal")]
    pub pass_rate: f64,
    /// Mean `S_M` over every candidate scored this iteration.
    #[serde(with = "decimal")]
    pub mean_tifa: f64,
    #[serde(with = "decimal")]
    pub mean_aesthetic: f64,
    /// Benchmark mean score of this model version, when an evaluation suite is configured.
    #[serde(with = "decimal::option", default, skip_serializing_if = "Option::is_none")]
    pub eval_mean: Option<f64>,
    /// Fields written by newer versions; preserved on rewrite.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct IterationStateRaw {
    #[serde(default = "schema_v1")]
    schema_version: u32,
    index: usize,
    model_version: String,
    prompts_attempted: usize,
    prompts_curated: usize,
    #[serde(default)]
    prompts_failed: usize,
    #[serde(default)]
    candidates_scored: usize,
    #[serde(default)]
    candidates_dropped: usize,
    #[serde(with = "decimal")]
    pass_rate: f64,
    #[serde(with = "decimal")]
    mean_tifa: f64,
    #[serde(with = "decimal")]
    mean_aesthetic: f64,
    #[serde(with = "decimal::option", default)]
    eval_mean: Option<f64>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

fn schema_v1() -> u32 {
    1
}

impl TryFrom<IterationStateRaw> for IterationState {
    type Error = ValidationError;

    fn try_from(raw: IterationStateRaw) -> Result<Self, Self::Error> {
        let state = IterationState {
            schema_version: raw.schema_version,
            index: raw.index,
            model_version: raw.model_version,
            prompts_attempted: raw.prompts_attempted,
            prompts_curated: raw.prompts_curated,
            prompts_failed: raw.prompts_failed,
            candidates_scored: raw.candidates_scored,
            candidates_dropped: raw.candidates_dropped,
            pass_rate: raw.pass_rate,
            mean_tifa: raw.mean_tifa,
            mean_aesthetic: raw.mean_aesthetic,
            eval_mean: raw.eval_mean,
            extra: raw.extra,
        };
        state.check().into_result(state)
    }
}

impl IterationState {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Derives `pass_rate` from the counts and quantizes every fraction.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        model_version: impl Into<String>,
        prompts_attempted: usize,
        prompts_curated: usize,
        prompts_failed: usize,
        candidates_scored: usize,
        candidates_dropped: usize,
        mean_tifa: f64,
        mean_aesthetic: f64,
    ) -> Result<Self, ValidationError> {
        let pass_rate = if prompts_attempted > 0 {
            prompts_curated as f64 / prompts_attempted as f64
        } else {
            0.0
        };
        let state = IterationState {
            schema_version: Self::SCHEMA_VERSION,
            index,
            model_version: model_version.into(),
            prompts_attempted,
            prompts_curated,
            prompts_failed,
            candidates_scored,
            candidates_dropped,
            pass_rate: decimal::quantize(pass_rate),
            mean_tifa: decimal::quantize(mean_tifa),
            mean_aesthetic: decimal::quantize(mean_aesthetic),
            eval_mean: None,
            extra: BTreeMap::new(),
        };
        state.check().into_result(state)
    }

    pub fn with_eval_mean(mut self, eval_mean: f64) -> Self {
        self.eval_mean = Some(decimal::quantize(eval_mean));
        self
    }

    fn check(&self) -> ValidationError {
        let mut errors = ValidationError::new();
        if self.model_version.trim().is_empty() {
            errors.push("model_version", "must be non-empty");
        }
        if self.prompts_curated > self.prompts_attempted {
            errors.push("prompts_curated", "exceeds prompts_attempted");
        }
        if self.prompts_attempted > 0 {
            let expected = decimal::quantize(self.prompts_curated as f64 / self.prompts_attempted as f64);
            if expected != self.pass_rate {
                errors.push("pass_rate", "must equal prompts_curated / prompts_attempted");
            }
        }
        for (name, v) in [
            ("pass_rate", self.pass_rate),
            ("mean_tifa", self.mean_tifa),
            ("mean_aesthetic", self.mean_aesthetic),
        ] {
            if !in_unit_interval(v) {
                errors.push(name, format!("{v} outside [0, 1]"));
            }
        }
        if let Some(v) = self.eval_mean {
            if !in_unit_interval(v) {
                errors.push("eval_mean", format!("{v} outside [0, 1]"));
            }
        }
        errors
    }

    /// The metric used for convergence: the evaluation mean when present,
    /// otherwise the mean training-candidate `S_M`.
    pub fn convergence_metric(&self) -> f64 {
        self.eval_mean.unwrap_or(self.mean_tifa)
    }
}

string_enum! {
    LrSchedule {
        Cosine => "cosine",
        Constant => "constant",
    }
}

/// LoRA hyperparameters; the defaults reproduce the reference SDXL recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneHyperparams {
    pub lora_rank: u32,
    pub lora_alpha: f64,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: u32,
    pub batch_size: u32,
    pub grad_accum: u32,
    pub total_steps: u32,
    pub resolution: u32,
    pub random_flip: bool,
}

impl Default for FinetuneHyperparams {
    fn default() -> Self {
        FinetuneHyperparams {
            lora_rank: 128,
            lora_alpha: 0.5,
            learning_rate: 1e-4,
            schedule: LrSchedule::Cosine,
            warmup_steps: 0,
            batch_size: 8,
            grad_accum: 2,
            total_steps: 2500,
            resolution: 1024,
            random_flip: true,
        }
    }
}

impl FinetuneHyperparams {
    pub fn check(&self) -> ValidationError {
        let mut errors = ValidationError::new();
        for (name, v) in [
            ("lora_rank", self.lora_rank),
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("total_steps", self.total_steps),
            ("resolution", self.resolution),
        ] {
            if v == 0 {
                errors.push(name, "must be positive");
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errors.push("learning_rate", "must be a positive real");
        }
        if !self.lora_alpha.is_finite() || self.lora_alpha < 0.0 {
            errors.push("lora_alpha", "must be a non-negative real");
        }
        errors
    }
}

/// Job manifest sent to the finetune backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FinetuneSpecRaw")]
pub struct FinetuneSpec {
    #[serde(flatten)]
    pub hyperparams: FinetuneHyperparams,
    pub dataset_ref: String,
    /// The model version `G_s` this job starts from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_model_version: Option<String>,
}

#[derive(Deserialize)]
struct FinetuneSpecRaw {
    #[serde(flatten)]
    hyperparams: FinetuneHyperparams,
    dataset_ref: String,
    #[serde(default)]
    parent_model_version: Option<String>,
}

impl TryFrom<FinetuneSpecRaw> for FinetuneSpec {
    type Error = ValidationError;

    fn try_from(raw: FinetuneSpecRaw) -> Result<Self, Self::Error> {
        FinetuneSpec::new(raw.hyperparams, raw.dataset_ref, raw.parent_model_version)
    }
}

impl FinetuneSpec {
    pub fn new(
        hyperparams: FinetuneHyperparams,
        dataset_ref: impl Into<String>,
        parent_model_version: Option<String>,
    ) -> Result<Self, ValidationError> {
        let dataset_ref = dataset_ref.into();
        let mut errors = hyperparams.check();
        if dataset_ref.trim().is_empty() {
            errors.push("dataset_ref", "must be non-empty");
        }
        errors.into_result(FinetuneSpec {
            hyperparams,
            dataset_ref,
            parent_model_version,
        })
    }
}

/// Parameters of the in-process simulator backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorParams {
    /// Per-question success probability `δ` of the base model.
    pub base_fidelity: f64,
    pub fidelity_gain_per_iteration: f64,
    pub aesthetic_mean: f64,
    pub aesthetic_spread: f64,
    pub rng_seed: u64,
}

impl Default for SimulatorParams {
    fn default() -> Self {
        SimulatorParams {
            base_fidelity: 0.9,
            fidelity_gain_per_iteration: 0.01,
            aesthetic_mean: 0.7,
            aesthetic_spread: 0.1,
            rng_seed: 0,
        }
    }
}

impl SimulatorParams {
    pub fn check(&self) -> ValidationError {
        let mut errors = ValidationError::new();
        if !(self.base_fidelity.is_finite() && self.base_fidelity > 0.0 && self.base_fidelity <= 1.0) {
            errors.push("base_fidelity", "must lie in (0, 1]");
        }
        if !in_unit_interval(self.fidelity_gain_per_iteration) {
            errors.push("fidelity_gain_per_iteration", "must lie in [0, 1]");
        }
        if !in_unit_interval(self.aesthetic_mean) {
            errors.push("aesthetic_mean", "must lie in [0, 1]");
        }
        if !(self.aesthetic_spread.is_finite() && self.aesthetic_spread >= 0.0) {
            errors.push("aesthetic_spread", "must be non-negative");
        }
        errors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> ImageRef {
        ImageRef::new(format!("sim://{seed}"), seed, "sim-G0").unwrap()
    }

    #[test]
    fn prompt_rejects_empty_text() {
        let err = Prompt::new("p1", "  ", PromptCategory::Food, PromptSource::Generated).unwrap_err();
        assert!(err.mentions("text"));
    }

    #[test]
    fn prompt_category_round_trips_slash_name() {
        assert_eq!(
            "animal/human".parse::<PromptCategory>().unwrap(),
            PromptCategory::AnimalHuman
        );
        assert_eq!(PromptCategory::ALL.len(), 12);
        assert_eq!(AnswerType::ALL.len(), 14);
        let json = serde_json::to_string(&PromptCategory::AnimalHuman).unwrap();
        assert_eq!(json, "\"animal/human\"");
    }

    #[test]
    fn pair_answer_must_be_a_choice() {
        let err = QuestionAnswerPair::new(
            "what color?",
            vec!["red".into(), "blue".into()],
            "green",
            "green",
            AnswerType::Color,
        )
        .unwrap_err();
        assert!(err.mentions("answer"));
    }

    #[test]
    fn pair_rejects_duplicate_choices() {
        let err = QuestionAnswerPair::new("q?", vec!["a".into(), "a".into()], "a", "", AnswerType::Other).unwrap_err();
        assert!(err.mentions("choices"));
    }

    #[test]
    fn question_set_rejects_forward_edges_and_duplicates() {
        let a = QuestionAnswerPair::binary("is there a bike?", "bike", AnswerType::Object).with_parents(vec![1]);
        let b = QuestionAnswerPair::binary("is there a bike?", "bike", AnswerType::Object);
        let err = QuestionSet::new("p", vec![a, b]).unwrap_err();
        assert!(err.mentions("pairs[0].depends_on"));
        assert!(err.mentions("pairs[1].question"));
    }

    #[test]
    fn question_set_deserialization_enforces_invariants() {
        let json = r#"{"prompt_id":"p","pairs":[{"question":"q","choices":["yes","no"],"answer":"maybe","answer_type":"other"}]}"#;
        assert!(serde_json::from_str::<QuestionSet>(json).is_err());
    }

    #[test]
    fn scored_candidate_derives_scores() {
        let c = ScoredCandidate::new(
            image(1),
            vec![true; 7].into_iter().chain(vec![false; 3]).collect(),
            0.72,
        )
        .unwrap();
        assert_eq!(c.mean_score, 0.7);
        assert_eq!(c.absolute_score, 0);
        assert_eq!(c.aesthetic, 0.72);
    }

    #[test]
    fn scored_candidate_round_trips_exactly() {
        let c = ScoredCandidate::new(image(3), vec![true, false, true], 0.123_456_789).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"mean_score\":\"0.666667\""));
        let back: ScoredCandidate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn scored_candidate_detects_tampered_scores() {
        let c = ScoredCandidate::new(image(3), vec![true, false], 0.5).unwrap();
        let json = serde_json::to_string(&c)
            .unwrap()
            .replace("\"0.500000\",\"absolute", "\"0.900000\",\"absolute");
        assert!(serde_json::from_str::<ScoredCandidate>(&json).is_err());
    }

    #[test]
    fn scored_candidate_rejects_out_of_range_aesthetic() {
        assert!(ScoredCandidate::new(image(0), vec![true], 1.2).is_err());
        assert!(ScoredCandidate::new(image(0), vec![], 0.5).is_err());
    }

    #[test]
    fn thresholds_validate_range() {
        assert!(FilterThresholds::new(1.2, 0.6).is_err());
        assert!(FilterThresholds::new(0.9, 0.6).is_ok());
    }

    #[test]
    fn iteration_state_checks_pass_rate() {
        let s = IterationState::new(0, "sim-G0", 3, 1, 0, 24, 0, 0.8, 0.7).unwrap();
        assert_eq!(s.pass_rate, 0.333333);
        assert!(IterationState::new(0, "sim-G0", 1, 2, 0, 0, 0, 0.5, 0.5).is_err());
        let json = serde_json::to_string(&s).unwrap();
        let tampered = json.replace("\"pass_rate\":\"0.333333\"", "\"pass_rate\":\"0.500000\"");
        assert!(serde_json::from_str::<IterationState>(&tampered).is_err());
    }

    #[test]
    fn iteration_state_preserves_unknown_fields() {
        let s = IterationState::new(2, "sim-G2", 10, 4, 0, 80, 0, 0.9, 0.7).unwrap();
        let mut value = serde_json::to_value(&s).unwrap();
        value["future_field"] = serde_json::json!({"x": 1});
        let back: IterationState = serde_json::from_value(value.clone()).unwrap();
        assert_eq!(back.extra.get("future_field"), Some(&serde_json::json!({"x": 1})));
        assert_eq!(serde_json::to_value(&back).unwrap(), value);
    }

    #[test]
    fn finetune_defaults_match_reference_recipe() {
        let h = FinetuneHyperparams::default();
        assert_eq!(h.lora_rank, 128);
        assert_eq!(h.learning_rate, 1e-4);
        assert_eq!(h.schedule, LrSchedule::Cosine);
        assert_eq!(
            (h.warmup_steps, h.batch_size, h.grad_accum, h.total_steps),
            (0, 8, 2, 2500)
        );
        assert_eq!(h.resolution, 1024);
        assert!(h.random_flip);
        assert!(h.check().is_empty());
    }

    #[test]
    fn finetune_spec_serializes_flat() {
        let spec = FinetuneSpec::new(
            FinetuneHyperparams::default(),
            "store:run/iterations/0/dataset.jsonl",
            Some("sim-G0".into()),
        )
        .unwrap();
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["lora_rank"], 128);
        assert_eq!(v["dataset_ref"], "store:run/iterations/0/dataset.jsonl");
        let back: FinetuneSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
        let zero_rank = FinetuneHyperparams {
            lora_rank: 0,
            ..Default::default()
        };
        assert!(FinetuneSpec::new(zero_rank, "x", None).is_err());
    }

    #[test]
    fn simulator_params_reject_zero_fidelity() {
        let p = SimulatorParams {
            base_fidelity: 0.0,
            ..Default::default()
        };
        assert!(p.check().mentions("base_fidelity"));
    }
}
