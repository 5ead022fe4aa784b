//! In-process stand-ins for all five roles.
//!
//! An "image" is a latent record `(prompt text, seed, generation)`. Whether
//! the VQA model answers a question correctly is decided by a uniform draw
//! keyed on `(rng_seed, prompt, seed, question)` compared against the
//! generation's fidelity `δ_s`. The draw ignores the generation, so raising
//! `δ_s` can only turn wrong answers into right ones. Aesthetic scores are a
//! clamped normal draw keyed on `(rng_seed, prompt, seed)`.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::backends::{
    AestheticModel, AestheticReading, AestheticScale, BackendError, FinetuneJob, Finetuner, ImageGenerator, JobStatus,
    LanguageModel, VqaModel,
};
use crate::config::Role;
use crate::types::{FinetuneSpec, ImageRef, Prompt, QuestionAnswerPair, SimulatorParams};

const VERSION_PREFIX: &str = "sim-G";

/// Generation number encoded in a simulator model version (`sim-G3` → 3).
pub fn model_generation(model_version: &str) -> Option<u32> {
    model_version.strip_prefix(VERSION_PREFIX)?.parse().ok()
}

#[derive(Debug, Clone)]
struct Latent {
    prompt_text: String,
    seed: u64,
}

pub struct Simulator {
    params: SimulatorParams,
    images: Mutex<HashMap<String, Latent>>,
    jobs: Mutex<HashMap<String, FinetuneJob>>,
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

fn unit(bytes: &[u8; 32]) -> f64 {
    let word = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

impl Simulator {
    pub fn new(params: SimulatorParams) -> Self {
        Simulator {
            params,
            images: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &SimulatorParams {
        &self.params
    }

    /// Per-question success probability `δ_s` of a model version.
    pub fn fidelity(&self, model_version: &str) -> Option<f64> {
        let generation = model_generation(model_version)?;
        let p = &self.params;
        Some((p.base_fidelity + generation as f64 * p.fidelity_gain_per_iteration).min(1.0))
    }

    pub fn image_uri(&self, prompt_text: &str, seed: u64, model_version: &str) -> String {
        let d = digest(&[
            &self.params.rng_seed.to_le_bytes(),
            prompt_text.as_bytes(),
            &seed.to_le_bytes(),
            model_version.as_bytes(),
        ]);
        format!("sim://{}", hex::encode(&d[..12]))
    }

    /// The uniform draw deciding whether `question` is answered correctly.
    pub fn correctness_draw(&self, prompt_text: &str, seed: u64, question: &str) -> f64 {
        unit(&digest(&[
            b"vqa",
            &self.params.rng_seed.to_le_bytes(),
            prompt_text.as_bytes(),
            &seed.to_le_bytes(),
            question.as_bytes(),
        ]))
    }

    pub fn aesthetic_value(&self, prompt_text: &str, seed: u64) -> f64 {
        let d = digest(&[
            b"aesthetic",
            &self.params.rng_seed.to_le_bytes(),
            prompt_text.as_bytes(),
            &seed.to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::from_seed(d);
        let p = &self.params;
        let normal = Normal::new(p.aesthetic_mean, p.aesthetic_spread.max(0.0)).expect("finite spread");
        normal.sample(&mut rng).clamp(0.0, 1.0)
    }

    fn latent(&self, image: &ImageRef, role: Role) -> Result<Latent, BackendError> {
        self.images
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&image.uri)
            .cloned()
            .ok_or_else(|| BackendError::protocol(role, format!("unknown image {}", image.uri)))
    }
}

impl ImageGenerator for Simulator {
    fn generate(&self, prompt: &Prompt, seed: u64, model_version: &str) -> Result<ImageRef, BackendError> {
        if model_generation(model_version).is_none() {
            return Err(BackendError::GenerationRejected(format!(
                "simulator does not serve model version {model_version:?}"
            )));
        }
        let uri = self.image_uri(&prompt.text, seed, model_version);
        self.images.lock().unwrap_or_else(|e| e.into_inner()).insert(
            uri.clone(),
            Latent {
                prompt_text: prompt.text.clone(),
                seed,
            },
        );
        ImageRef::new(uri, seed, model_version).map_err(|e| BackendError::protocol(Role::Generator, e.to_string()))
    }
}

impl VqaModel for Simulator {
    fn answer(&self, image: &ImageRef, pair: &QuestionAnswerPair) -> Result<String, BackendError> {
        let latent = self.latent(image, Role::Vqa)?;
        let delta = self.fidelity(&image.model_version).ok_or_else(|| {
            BackendError::protocol(Role::Vqa, format!("unknown model version {}", image.model_version))
        })?;
        if self.correctness_draw(&latent.prompt_text, latent.seed, &pair.question) < delta {
            return Ok(pair.answer.clone());
        }
        let wrong = pair.choices.iter().find(|c| **c != pair.answer).unwrap_or(&pair.answer);
        Ok(wrong.clone())
    }
}

impl AestheticModel for Simulator {
    fn score(&self, image: &ImageRef) -> Result<AestheticReading, BackendError> {
        let latent = self.latent(image, Role::Aesthetic)?;
        Ok(AestheticReading {
            score: self.aesthetic_value(&latent.prompt_text, latent.seed),
            scale: AestheticScale::Unit,
        })
    }
}

impl Finetuner for Simulator {
    fn submit(&self, spec: &FinetuneSpec) -> Result<FinetuneJob, BackendError> {
        let parent = spec
            .parent_model_version
            .as_deref()
            .ok_or_else(|| BackendError::JobFailed("simulated finetune needs a parent_model_version".into()))?;
        let generation = model_generation(parent)
            .ok_or_else(|| BackendError::JobFailed(format!("simulator cannot finetune {parent:?}")))?;
        let body = serde_json::to_vec(spec).map_err(|e| BackendError::protocol(Role::Finetune, e.to_string()))?;
        let job_id = format!("sim-job-{}", hex::encode(&digest(&[&body])[..8]));
        let done = FinetuneJob::new(
            job_id.clone(),
            spec.clone(),
            JobStatus::Done,
            Some(format!("{VERSION_PREFIX}{}", generation + 1)),
            None,
        )
        .map_err(|e| BackendError::protocol(Role::Finetune, e))?;
        self.jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(job_id.clone(), done);
        FinetuneJob::new(job_id, spec.clone(), JobStatus::Queued, None, None)
            .map_err(|e| BackendError::protocol(Role::Finetune, e))
    }

    fn poll(&self, job_id: &str) -> Result<FinetuneJob, BackendError> {
        self.jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(job_id)
            .cloned()
            .ok_or_else(|| BackendError::JobFailed("unknown job".into()))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "of", "on", "in", "at", "to", "with", "is", "are", "its", "it", "by", "for", "from",
    "each", "next", "near", "under", "over", "behind", "front", "top", "some", "this", "that", "there",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "pink", "brown",
];
const NUMBERS: &[&str] = &["one", "two", "three", "four", "five", "six"];
const NOUNS: &[&str] = &[
    "cat", "dog", "fox", "horse", "apple", "cup", "chair", "kite", "boat", "bird", "lamp", "book", "robot", "drum",
    "owl", "bear",
];
const RELATIONS: &[&str] = &["next to", "on top of", "behind", "in front of", "beneath", "beside"];
const PLACES: &[&str] = &[
    "a wooden table",
    "a snowy field",
    "a city street",
    "a sandy beach",
    "a quiet library",
    "a green hill",
    "a kitchen counter",
    "a mountain lake",
];

/// Fields of a `[task: ... | key: value]` header line.
fn task_header(instruction: &str) -> HashMap<String, String> {
    let mut fields = HashMap::new();
    let Some(line) = instruction
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with("[task:") && l.ends_with(']'))
    else {
        return fields;
    };
    for part in line[1..line.len() - 1].split('|') {
        if let Some((k, v)) = part.split_once(':') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    fields
}

impl Simulator {
    fn sim_prompts(&self, instruction: &str, fields: &HashMap<String, String>) -> String {
        let count: usize = fields.get("count").and_then(|c| c.parse().ok()).unwrap_or(10);
        let d = digest(&[&self.params.rng_seed.to_le_bytes(), instruction.as_bytes()]);
        let offset = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let radix = [NUMBERS.len(), COLORS.len(), NOUNS.len(), RELATIONS.len(), PLACES.len()];
        let mut lines = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let mut n = offset.wrapping_add(i.wrapping_mul(7919));
            let mut digits = [0usize; 5];
            for (slot, r) in digits.iter_mut().zip(radix) {
                *slot = (n % r as u64) as usize;
                n /= r as u64;
            }
            let number = NUMBERS[digits[0]];
            let noun = NOUNS[digits[2]];
            let noun = if number == "one" {
                noun.to_string()
            } else if noun.ends_with('x') {
                format!("{noun}es")
            } else {
                format!("{noun}s")
            };
            lines.push(format!(
                "{number} {} {noun} {} {}",
                COLORS[digits[1]], RELATIONS[digits[3]], PLACES[digits[4]]
            ));
        }
        lines.join("\n")
    }

    fn sim_questions(instruction: &str) -> String {
        let Some(prompt) = instruction
            .lines()
            .find_map(|l| l.trim().strip_prefix("Description:").map(str::trim))
        else {
            return String::new();
        };
        let words: Vec<String> = prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut blocks = Vec::new();
        let mut seen = Vec::new();
        for (i, word) in words.iter().enumerate() {
            if STOPWORDS.contains(&word.as_str()) || seen.contains(word) {
                continue;
            }
            seen.push(word.clone());
            if let Some(n) = NUMBERS.iter().position(|w| w == word) {
                if let Some(noun) = words[i + 1..].iter().find(|w| !COLORS.contains(&w.as_str())) {
                    blocks.push(format!(
                        "Q: how many {noun} are there?\nC: 1 | 2 | 3 | 4 | 5 | 6\nA: {}\nS: {word}\nT: counting",
                        n + 1
                    ));
                }
                continue;
            }
            let answer_type = if COLORS.contains(&word.as_str()) {
                "color"
            } else {
                "object"
            };
            let question = if answer_type == "color" {
                format!("is anything {word}?")
            } else {
                format!("is there a {word}?")
            };
            blocks.push(format!(
                "Q: {question}\nC: yes | no\nA: yes\nS: {word}\nT: {answer_type}"
            ));
            if blocks.len() == 10 {
                break;
            }
        }
        blocks.join("\n\n")
    }

    fn sim_filter(instruction: &str) -> String {
        let mut verdicts = Vec::new();
        for line in instruction.lines() {
            let Some((index, rest)) = line.trim().split_once(". Q:") else {
                continue;
            };
            if index.parse::<usize>().is_err() {
                continue;
            }
            let answer = rest
                .rsplit_once("| A:")
                .map(|(_, a)| a.trim().to_lowercase())
                .unwrap_or_default();
            let verdict = if answer.contains(" and ") {
                "MULTIPLE_ANSWERS"
            } else if ["a lot", "a lot of people", "many", "some", "several", "a few"].contains(&answer.as_str()) {
                "AMBIGUOUS"
            } else if answer.is_empty() {
                "INVALID"
            } else {
                "KEEP"
            };
            verdicts.push(format!("{index}: {verdict}"));
        }
        verdicts.join("\n")
    }
}

impl LanguageModel for Simulator {
    fn complete(&self, instruction: &str, _examples: &[String]) -> Result<String, BackendError> {
        let fields = task_header(instruction);
        Ok(match fields.get("task").map(String::as_str) {
            Some("qa") => Self::sim_questions(instruction),
            Some("filter") => Self::sim_filter(instruction),
            _ => self.sim_prompts(instruction, &fields),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backends, VqaVerdict};
    use crate::types::{AnswerType, FinetuneHyperparams, PromptCategory, PromptSource};

    fn prompt(text: &str) -> Prompt {
        Prompt::new("p", text, PromptCategory::Counting, PromptSource::Imported).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_seed_distinct() {
        let sim = Simulator::new(SimulatorParams::default());
        let p = prompt("two cats on a sofa");
        let a = sim.generate(&p, 7, "sim-G0").unwrap();
        let b = Simulator::new(SimulatorParams::default())
            .generate(&p, 7, "sim-G0")
            .unwrap();
        assert_eq!(a, b);
        assert!(a.uri.starts_with("sim://"));
        let uris: std::collections::HashSet<_> = (0..8).map(|s| sim.generate(&p, s, "sim-G0").unwrap().uri).collect();
        assert_eq!(uris.len(), 8);
    }

    #[test]
    fn foreign_model_versions_are_rejected() {
        let sim = Simulator::new(SimulatorParams::default());
        let err = sim.generate(&prompt("x"), 0, "sdxl-1.0").unwrap_err();
        assert!(matches!(err, BackendError::GenerationRejected(_)));
    }

    #[test]
    fn vqa_follows_the_correctness_draw() {
        let backends = Backends::simulated(SimulatorParams::default());
        let sim = Simulator::new(SimulatorParams::default());
        let p = prompt("three dogs in a park");
        for seed in 0..16 {
            let image = backends.generate_image(&p, seed, "sim-G0").unwrap();
            for q in ["is there a dog?", "is there a park?", "are there three dogs?"] {
                let pair = QuestionAnswerPair::binary(q, "dog", AnswerType::Animal);
                let expected = sim.correctness_draw(&p.text, seed, q) < 0.9;
                let verdict = backends.answer_question(&image, &pair).unwrap();
                assert_eq!(verdict.is_correct(), expected);
                assert_ne!(
                    verdict,
                    VqaVerdict::ChoiceMismatch {
                        returned: String::new()
                    }
                );
            }
        }
    }

    #[test]
    fn correctness_is_monotone_in_generation() {
        let params = SimulatorParams {
            base_fidelity: 0.5,
            fidelity_gain_per_iteration: 0.2,
            ..SimulatorParams::default()
        };
        let backends = Backends::simulated(params);
        let p = prompt("a red kite");
        let pair = QuestionAnswerPair::binary("is there a kite?", "kite", AnswerType::Object);
        for seed in 0..64 {
            let g0 = backends.generate_image(&p, seed, "sim-G0").unwrap();
            let g1 = backends.generate_image(&p, seed, "sim-G1").unwrap();
            let c0 = backends.answer_question(&g0, &pair).unwrap().is_correct();
            let c1 = backends.answer_question(&g1, &pair).unwrap().is_correct();
            assert!(!c0 || c1);
        }
    }

    #[test]
    fn aesthetic_is_reproducible_and_bounded() {
        let params = SimulatorParams {
            aesthetic_mean: 0.6,
            ..SimulatorParams::default()
        };
        let a = Backends::simulated(params.clone());
        let b = Backends::simulated(params);
        let p = prompt("a lamp");
        let ia = a.generate_image(&p, 3, "sim-G0").unwrap();
        let ib = b.generate_image(&p, 3, "sim-G0").unwrap();
        let va = a.score_aesthetic(&ia).unwrap();
        assert_eq!(va, b.score_aesthetic(&ib).unwrap());
        assert!((0.0..=1.0).contains(&va));
    }

    #[test]
    fn finetune_completes_and_raises_fidelity() {
        let sim = Simulator::new(SimulatorParams::default());
        let spec = FinetuneSpec::new(
            FinetuneHyperparams::default(),
            "store:run/iterations/0/dataset.jsonl",
            Some("sim-G0".into()),
        )
        .unwrap();
        let job = sim.submit(&spec).unwrap();
        assert_eq!(job.status, JobStatus::Queued);
        assert!(job.job_id.starts_with("sim-job-"));
        let done = sim.poll(&job.job_id).unwrap();
        assert_eq!(done.status, JobStatus::Done);
        assert_eq!(done.result_model_version.as_deref(), Some("sim-G1"));
        assert_eq!(sim.fidelity("sim-G1"), Some(0.9 + 0.01));
        assert_eq!(
            sim.poll("nope").unwrap_err(),
            BackendError::JobFailed("unknown job".into())
        );
    }

    #[test]
    fn llm_prompt_generation_honours_count() {
        let sim = Simulator::new(SimulatorParams::default());
        let out = sim
            .complete("[task: prompts | category: counting | count: 12]\nwrite prompts", &[])
            .unwrap();
        assert_eq!(out.lines().count(), 12);
    }

    #[test]
    fn llm_filter_flags_known_failure_modes() {
        let instruction = "[task: filter]\n1. Q: what color is the panda? | A: black and white\n2. Q: how many people? | A: a lot of people\n3. Q: is there a cat? | A: yes";
        let out = Simulator::sim_filter(instruction);
        assert_eq!(out, "1: MULTIPLE_ANSWERS\n2: AMBIGUOUS\n3: KEEP");
    }
}
