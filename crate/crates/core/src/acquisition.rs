//! Building a prompt corpus with a language model: prompt generation from
//! seed examples, question-answer generation, and removal of questions that
//! cannot be graded reliably.
//!
//! Instruction texts live in `templates/` and can be replaced at run time.
//! Placeholders are `{category}`, `{count}`, `{examples}`, `{prompt}` and
//! `{pairs}`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{BackendError, LanguageModel};
use crate::corpus::{Corpus, CorpusEntry};
use crate::types::{AnswerType, Prompt, PromptCategory, PromptSource, QuestionAnswerPair, QuestionSet};

pub const SEED_PROMPTS_PER_BATCH: usize = 5;

const PROMPT_TEMPLATE: &str = include_str!("../templates/prompt_generation.txt");
const QA_TEMPLATE: &str = include_str!("../templates/qa_generation.txt");
const FILTER_TEMPLATE: &str = include_str!("../templates/qa_filtering.txt");
const SEED_PROMPTS: &str = include_str!("../templates/seed_prompts.json");

#[derive(Debug, thiserror::Error)]
pub enum AcquisitionError {
    #[error("invalid seed batch: {0}")]
    InvalidBatch(String),
    #[error("language model returned no usable prompts for category {0}")]
    EmptyGeneration(PromptCategory),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("templates: {0}")]
    Templates(#[from] io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("every prompt batch failed; last error: {0}")]
    AllBatchesFailed(String),
}

/// The three instruction texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub prompt_generation: String,
    pub qa_generation: String,
    pub qa_filtering: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            prompt_generation: PROMPT_TEMPLATE.to_string(),
            qa_generation: QA_TEMPLATE.to_string(),
            qa_filtering: FILTER_TEMPLATE.to_string(),
        }
    }
}

impl Templates {
    /// Reads `prompt_generation.txt`, `qa_generation.txt` and
    /// `qa_filtering.txt` from `dir`; missing files keep the built-in text.
    pub fn load_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str, fallback: &str| -> io::Result<String> {
            match fs::read_to_string(dir.join(name)) {
                Ok(t) => Ok(t),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(e) => Err(e),
            }
        };
        Ok(Templates {
            prompt_generation: read("prompt_generation.txt", PROMPT_TEMPLATE)?,
            qa_generation: read("qa_generation.txt", QA_TEMPLATE)?,
            qa_filtering: read("qa_filtering.txt", FILTER_TEMPLATE)?,
        })
    }
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Five hand-written examples steering generation toward one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedBatch {
    pub seed_prompts: Vec<String>,
    pub target_category: PromptCategory,
    pub instruction_template: String,
}

impl SeedBatch {
    pub fn new(
        seed_prompts: Vec<String>,
        target_category: PromptCategory,
        instruction_template: impl Into<String>,
    ) -> Result<Self, AcquisitionError> {
        let instruction_template = instruction_template.into();
        if seed_prompts.len() != SEED_PROMPTS_PER_BATCH {
            return Err(AcquisitionError::InvalidBatch(format!(
                "expected exactly {SEED_PROMPTS_PER_BATCH} seed prompts, got {}",
                seed_prompts.len()
            )));
        }
        if seed_prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(AcquisitionError::InvalidBatch("seed prompts must be non-empty".into()));
        }
        if instruction_template.trim().is_empty() {
            return Err(AcquisitionError::InvalidBatch("instruction template is empty".into()));
        }
        Ok(SeedBatch {
            seed_prompts,
            target_category,
            instruction_template,
        })
    }
}

/// Stable id derived from the case-folded prompt text.
pub fn prompt_id(text: &str) -> String {
    let digest = Sha256::digest(text.trim().to_lowercase().as_bytes());
    format!("gen-{}", hex::encode(&digest[..6]))
}

/// One prompt per non-empty line; list markers and surrounding quotes are stripped.
pub fn parse_prompt_lines(completion: &str) -> Vec<String> {
    completion
        .lines()
        .map(|line| {
            let mut l = line.trim();
            if let Some(rest) = l.strip_prefix(['-', '*', '•']) {
                l = rest.trim_start();
            }
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                if let Some(rest) = l[digits..].strip_prefix(['.', ')', ':']) {
                    l = rest.trim_start();
                }
            }
            l.trim_matches(|c| c == '"' || c == '\'').trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Asks the language model for up to `count` new prompts in the batch's category.
pub fn generate_prompts(
    batch: &SeedBatch,
    count: usize,
    llm: &dyn LanguageModel,
) -> Result<Vec<Prompt>, AcquisitionError> {
    if count == 0 {
        return Err(AcquisitionError::InvalidBatch("count must be ≥ 1".into()));
    }
    let examples: String = batch.seed_prompts.iter().map(|p| format!("{p}\n")).collect();
    let instruction = render(
        &batch.instruction_template,
        &[
            ("category", batch.target_category.as_str()),
            ("count", &count.to_string()),
            ("examples", examples.trim_end()),
        ],
    );
    let completion = llm.complete(&instruction, &batch.seed_prompts)?;
    let mut seen = HashSet::new();
    let mut prompts = Vec::new();
    for text in parse_prompt_lines(&completion) {
        if prompts.len() == count {
            break;
        }
        if !seen.insert(text.to_lowercase()) {
            continue;
        }
        let prompt = Prompt::new(prompt_id(&text), text, batch.target_category, PromptSource::Generated)
            .expect("non-empty id and text");
        prompts.push(prompt);
    }
    if prompts.is_empty() {
        return Err(AcquisitionError::EmptyGeneration(batch.target_category));
    }
    Ok(prompts)
}

/// Result of parsing one QA completion.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QaParse {
    pub pairs: Vec<QuestionAnswerPair>,
    /// Blocks found in the completion.
    pub blocks: usize,
    /// Blocks dropped as malformed, including answers outside the choices.
    pub unparseable: usize,
}

fn parse_block(lines: &[&str]) -> Result<QuestionAnswerPair, String> {
    let mut fields: BTreeMap<char, String> = BTreeMap::new();
    for line in lines {
        let Some((key, value)) = line.split_once(':') else {
            return Err(format!("line without label: {line:?}"));
        };
        let key = key.trim();
        let label = match key.to_ascii_uppercase().as_str() {
            "Q" => 'Q',
            "C" => 'C',
            "A" => 'A',
            "S" => 'S',
            "T" => 'T',
            "D" => 'D',
            _ => return Err(format!("unknown label {key:?}")),
        };
        if fields.insert(label, value.trim().to_string()).is_some() {
            return Err(format!("repeated label {label}"));
        }
    }
    let field = |k: char| fields.get(&k).cloned().ok_or_else(|| format!("missing {k}:"));
    let question = field('Q')?;
    let choices: Vec<String> = field('C')?
        .split('|')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    let raw_answer = field('A')?;
    let answer = choices
        .iter()
        .find(|c| c.eq_ignore_ascii_case(&raw_answer))
        .cloned()
        .ok_or_else(|| format!("answer {raw_answer:?} not among choices"))?;
    let answer_type: AnswerType = field('T')?.parse()?;
    let source = fields.get(&'S').cloned().unwrap_or_default();
    let parents = match fields.get(&'D') {
        None => Vec::new(),
        Some(d) if d.is_empty() => Vec::new(),
        Some(d) => d
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad dependency {p:?}: {e}"))
            })
            .collect::<Result<_, _>>()?,
    };
    let pair = QuestionAnswerPair::new(question, choices, answer, source, answer_type).map_err(|e| e.to_string())?;
    Ok(pair.with_parents(parents))
}

/// Parses `Q:/C:/A:/S:/T:` blocks separated by blank lines.
pub fn parse_qa_blocks(completion: &str) -> QaParse {
    let mut result = QaParse::default();
    let mut blocks: Vec<Vec<&str>> = vec![Vec::new()];
    for line in completion.lines().map(str::trim) {
        if line.is_empty() {
            if !blocks.last().expect("non-empty").is_empty() {
                blocks.push(Vec::new());
            }
        } else {
            blocks.last_mut().expect("non-empty").push(line);
        }
    }
    // Block indices as written, so `D:` references survive dropped blocks.
    let mut kept_index: Vec<Option<usize>> = Vec::new();
    let mut texts = HashSet::new();
    for block in blocks.into_iter().filter(|b| !b.is_empty()) {
        result.blocks += 1;
        let parsed = parse_block(&block).and_then(|mut pair| {
            let mut remapped = Vec::new();
            for &p in &pair.depends_on {
                match kept_index.get(p) {
                    Some(Some(k)) => remapped.push(*k),
                    Some(None) => return Err(format!("depends on dropped block {p}")),
                    None => return Err(format!("depends on later or missing block {p}")),
                }
            }
            remapped.sort_unstable();
            remapped.dedup();
            pair.depends_on = remapped;
            if !texts.insert(pair.question.clone()) {
                return Err(format!("duplicate question {:?}", pair.question));
            }
            Ok(pair)
        });
        match parsed {
            Ok(pair) => {
                kept_index.push(Some(result.pairs.len()));
                result.pairs.push(pair);
            }
            Err(e) => {
                log::debug!("dropping QA block: {e}");
                kept_index.push(None);
                result.unparseable += 1;
            }
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaGeneration {
    pub questions: QuestionSet,
    pub generated: usize,
    pub unparseable: usize,
}

pub fn generate_qa(
    prompt: &Prompt,
    llm: &dyn LanguageModel,
    templates: &Templates,
) -> Result<QaGeneration, AcquisitionError> {
    let instruction = render(&templates.qa_generation, &[("prompt", &prompt.text)]);
    let completion = llm.complete(&instruction, &[])?;
    let parsed = parse_qa_blocks(&completion);
    let questions = QuestionSet::new(prompt.id.clone(), parsed.pairs).expect("parser enforces set invariants");
    Ok(QaGeneration {
        questions,
        generated: parsed.blocks,
        unparseable: parsed.unparseable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Keep,
    MultipleAnswers,
    Ambiguous,
    Invalid,
}

impl FilterVerdict {
    fn parse(token: &str) -> Option<Self> {
        match token
            .trim()
            .trim_end_matches('.')
            .to_ascii_uppercase()
            .replace([' ', '-'], "_")
            .as_str()
        {
            "KEEP" => Some(FilterVerdict::Keep),
            "MULTIPLE_ANSWERS" | "MULTIPLE" => Some(FilterVerdict::MultipleAnswers),
            "AMBIGUOUS" => Some(FilterVerdict::Ambiguous),
            "INVALID" => Some(FilterVerdict::Invalid),
            _ => None,
        }
    }
}

/// Reads `<number>: <verdict>` lines (numbers start at 1). Questions without
/// a recognizable verdict are kept.
pub fn parse_filter_reply(reply: &str, n: usize) -> Vec<FilterVerdict> {
    let mut verdicts = vec![FilterVerdict::Keep; n];
    for line in reply.lines() {
        let Some((index, verdict)) = line.trim().split_once(':') else {
            continue;
        };
        let Ok(index) = index.trim().trim_start_matches('#').parse::<usize>() else {
            continue;
        };
        match (index.checked_sub(1), FilterVerdict::parse(verdict)) {
            (Some(i), Some(v)) if i < n => verdicts[i] = v,
            _ => log::debug!("ignoring filter line {line:?}"),
        }
    }
    verdicts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub questions: QuestionSet,
    pub dropped_multiple_answers: usize,
    pub dropped_ambiguous: usize,
    pub dropped_invalid: usize,
}

fn render_pairs(qs: &QuestionSet) -> String {
    qs.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "{}. Q: {} | C: {} | A: {}",
                i + 1,
                p.question,
                p.choices.join(" / "),
                p.answer
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drops pairs the language model flags; survivors keep their order and
/// dependency edges to dropped pairs are removed.
pub fn filter_unanswerable(
    qs: &QuestionSet,
    prompt: &Prompt,
    llm: &dyn LanguageModel,
    templates: &Templates,
) -> Result<FilterOutcome, AcquisitionError> {
    let mut outcome = FilterOutcome {
        questions: qs.clone(),
        dropped_multiple_answers: 0,
        dropped_ambiguous: 0,
        dropped_invalid: 0,
    };
    if qs.is_empty() {
        return Ok(outcome);
    }
    let instruction = render(
        &templates.qa_filtering,
        &[("prompt", &prompt.text), ("pairs", &render_pairs(qs))],
    );
    let verdicts = parse_filter_reply(&llm.complete(&instruction, &[])?, qs.len());
    let mut new_index = vec![None; qs.len()];
    let mut kept = Vec::new();
    for (i, (pair, verdict)) in qs.pairs.iter().zip(&verdicts).enumerate() {
        match verdict {
            FilterVerdict::Keep => {
                new_index[i] = Some(kept.len());
                let parents = pair.depends_on.iter().filter_map(|&p| new_index[p]).collect();
                kept.push(pair.clone().with_parents(parents));
            }
            FilterVerdict::MultipleAnswers => outcome.dropped_multiple_answers += 1,
            FilterVerdict::Ambiguous => outcome.dropped_ambiguous += 1,
            FilterVerdict::Invalid => outcome.dropped_invalid += 1,
        }
    }
    outcome.questions = QuestionSet::new(qs.prompt_id.clone(), kept).expect("subset of a valid set");
    Ok(outcome)
}

/// Counters for one acquisition run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionReport {
    pub prompts_generated: usize,
    pub prompts_kept: usize,
    /// Prompts left with no question after filtering.
    pub prompts_excluded: usize,
    pub qa_generated: usize,
    pub qa_unparseable: usize,
    pub qa_dropped_multiple_answers: usize,
    pub qa_dropped_ambiguous: usize,
    pub qa_dropped_invalid: usize,
    pub qa_kept: usize,
    pub binary_questions: usize,
    pub multiple_choice_questions: usize,
    pub backend_failures: usize,
    pub empty_batches: usize,
    /// Kept prompts per category.
    pub per_category: BTreeMap<String, usize>,
    /// Kept questions per answer type.
    pub per_answer_type: BTreeMap<String, usize>,
}

impl AcquisitionReport {
    /// `kept + unparseable + the three drop counters == generated`.
    pub fn reconciles(&self) -> bool {
        self.qa_kept
            + self.qa_unparseable
            + self.qa_dropped_multiple_answers
            + self.qa_dropped_ambiguous
            + self.qa_dropped_invalid
            == self.qa_generated
    }

    pub fn is_partial(&self) -> bool {
        self.backend_failures > 0 || self.empty_batches > 0
    }

    pub fn mean_questions_per_prompt(&self) -> f64 {
        if self.prompts_kept == 0 {
            0.0
        } else {
            self.qa_kept as f64 / self.prompts_kept as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub category: PromptCategory,
    pub seeds: Vec<String>,
    pub count: usize,
}

/// Which batches to run and how many prompts to request from each.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionPlan {
    pub batches: Vec<BatchPlan>,
    pub templates_dir: Option<std::path::PathBuf>,
}

impl AcquisitionPlan {
    /// One batch per category from the bundled seed prompts.
    pub fn builtin(count_per_batch: usize) -> Self {
        let seeds: BTreeMap<String, Vec<String>> = serde_json::from_str(SEED_PROMPTS).expect("bundled seeds parse");
        let batches = PromptCategory::ALL
            .iter()
            .map(|&category| BatchPlan {
                category,
                seeds: seeds.get(category.as_str()).cloned().unwrap_or_default(),
                count: count_per_batch,
            })
            .collect();
        AcquisitionPlan {
            batches,
            templates_dir: None,
        }
    }

    pub fn templates(&self) -> io::Result<Templates> {
        match &self.templates_dir {
            Some(dir) => Templates::load_dir(dir),
            None => Ok(Templates::default()),
        }
    }
}

enum PromptResult {
    Kept(CorpusEntry, usize, FilterOutcome),
    Excluded(usize, FilterOutcome),
    Failed(String),
}

fn process_prompt(prompt: &Prompt, llm: &dyn LanguageModel, templates: &Templates) -> (usize, PromptResult) {
    let qa = match generate_qa(prompt, llm, templates) {
        Ok(qa) => qa,
        Err(e) => return (0, PromptResult::Failed(e.to_string())),
    };
    let generated = qa.generated;
    let filtered = match filter_unanswerable(&qa.questions, prompt, llm, templates) {
        Ok(f) => f,
        Err(e) => return (generated, PromptResult::Failed(e.to_string())),
    };
    if filtered.questions.is_empty() {
        return (generated, PromptResult::Excluded(qa.unparseable, filtered));
    }
    let entry = CorpusEntry {
        prompt: prompt.clone(),
        questions: filtered.questions.clone(),
    };
    (generated, PromptResult::Kept(entry, qa.unparseable, filtered))
}

/// Runs every batch, de-duplicates prompts across batches, then generates and
/// filters questions with `workers` prompts in flight.
pub fn acquire(
    plan: &AcquisitionPlan,
    llm: &dyn LanguageModel,
    templates: &Templates,
    workers: usize,
) -> Result<(Corpus, AcquisitionReport), AcquisitionError> {
    let mut report = AcquisitionReport::default();
    let mut prompts = Vec::new();
    let mut seen = HashSet::new();
    let mut last_error = None;
    for plan_batch in &plan.batches {
        let batch = SeedBatch::new(
            plan_batch.seeds.clone(),
            plan_batch.category,
            &templates.prompt_generation,
        )?;
        match generate_prompts(&batch, plan_batch.count, llm) {
            Ok(generated) => {
                for p in generated {
                    if seen.insert(p.text.to_lowercase()) {
                        prompts.push(p);
                    }
                }
            }
            Err(AcquisitionError::EmptyGeneration(c)) => {
                log::warn!("no prompts generated for category {c}");
                report.empty_batches += 1;
            }
            Err(e) => {
                log::error!("prompt generation for {} failed: {e}", plan_batch.category);
                report.backend_failures += 1;
                last_error = Some(e.to_string());
            }
        }
    }
    if prompts.is_empty() {
        if let Some(e) = last_error {
            return Err(AcquisitionError::AllBatchesFailed(e));
        }
    }
    report.prompts_generated = prompts.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AcquisitionError::Pool(e.to_string()))?;
    let results: Vec<(usize, PromptResult)> =
        pool.install(|| prompts.par_iter().map(|p| process_prompt(p, llm, templates)).collect());

    let mut entries = Vec::new();
    for (prompt, (generated, result)) in prompts.iter().zip(results) {
        report.qa_generated += generated;
        let filtered = match result {
            PromptResult::Failed(e) => {
                log::warn!("QA generation for {} failed: {e}", prompt.id);
                report.backend_failures += 1;
                // Generated pairs that never reached the filter count as unparseable.
                report.qa_unparseable += generated;
                continue;
            }
            PromptResult::Excluded(unparseable, filtered) => {
                report.qa_unparseable += unparseable;
                report.prompts_excluded += 1;
                filtered
            }
            PromptResult::Kept(entry, unparseable, filtered) => {
                report.qa_unparseable += unparseable;
                report.prompts_kept += 1;
                *report.per_category.entry(prompt.category.to_string()).or_default() += 1;
                for pair in &entry.questions.pairs {
                    *report.per_answer_type.entry(pair.answer_type.to_string()).or_default() += 1;
                    if pair.choices.len() == 2 && pair.choices.iter().any(|c| c.eq_ignore_ascii_case("yes")) {
                        report.binary_questions += 1;
                    } else {
                        report.multiple_choice_questions += 1;
                    }
                }
                entries.push(entry);
                filtered
            }
        };
        report.qa_dropped_multiple_answers += filtered.dropped_multiple_answers;
        report.qa_dropped_ambiguous += filtered.dropped_ambiguous;
        report.qa_dropped_invalid += filtered.dropped_invalid;
        report.qa_kept += filtered.questions.len();
    }
    let corpus = Corpus::new(entries).expect("prompt ids are unique after de-duplication");
    Ok((corpus, report))
}
