//! Client layer for the five external model roles.
//!
//! Each role is a small trait. Remote services speak one JSON-over-HTTP
//! protocol ([`wire`]); `sim:` endpoints resolve to the in-process
//! [`Simulator`], which implements every role without pixels or network.

mod http;
mod retry;
mod sim;
mod stub;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{Role, RunConfig};
use crate::types::{FinetuneSpec, ImageRef, Prompt, QuestionAnswerPair, SimulatorParams};

pub use http::HttpBackend;
pub use retry::RetryPolicy;
pub use sim::{model_generation, Simulator};
pub use stub::{EchoLlm, EmptyLlm, ReplayLlm, ReplayRule};
pub use wire::AestheticScale;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("{role} backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { role: Role, attempts: u32, message: String },
    #[error("generation rejected: {0}")]
    GenerationRejected(String),
    #[error("finetune job failed: {0}")]
    JobFailed(String),
    #[error("{role} backend rejected request ({code}): {message}")]
    Rejected { role: Role, code: String, message: String },
    #[error("{role} backend protocol error: {message}")]
    Protocol { role: Role, message: String },
    #[error("cannot build {role} backend: {message}")]
    Setup { role: Role, message: String },
}

impl BackendError {
    pub fn protocol(role: Role, message: impl Into<String>) -> Self {
        BackendError::Protocol {
            role,
            message: message.into(),
        }
    }

    pub fn is_unavailable(&self) -> bool {
        matches!(self, BackendError::Unavailable { .. })
    }
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &Prompt, seed: u64, model_version: &str) -> Result<ImageRef, BackendError>;
}

/// Answers one multiple-choice question about an image.
///
/// Implementations receive the whole pair; remote services are only sent
/// the question and choices, while the simulator uses the stored answer as
/// its ground truth.
pub trait VqaModel: Send + Sync {
    fn answer(&self, image: &ImageRef, pair: &QuestionAnswerPair) -> Result<String, BackendError>;
}

pub trait AestheticModel: Send + Sync {
    fn score(&self, image: &ImageRef) -> Result<AestheticReading, BackendError>;
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, instruction: &str, examples: &[String]) -> Result<String, BackendError>;
}

pub trait Finetuner: Send + Sync {
    fn submit(&self, spec: &FinetuneSpec) -> Result<FinetuneJob, BackendError>;
    fn poll(&self, job_id: &str) -> Result<FinetuneJob, BackendError>;
}

/// Raw aesthetic output before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AestheticReading {
    pub score: f64,
    pub scale: AestheticScale,
}

/// Maps a reading onto `[0, 1]`. The flag reports whether clamping was needed.
pub fn normalize_aesthetic(reading: AestheticReading) -> Result<(f64, bool), BackendError> {
    if !reading.score.is_finite() {
        return Err(BackendError::protocol(
            Role::Aesthetic,
            format!("non-finite score {}", reading.score),
        ));
    }
    let unit = match reading.scale {
        AestheticScale::Unit => reading.score,
        AestheticScale::Percent => reading.score / 100.0,
    };
    let clamped = unit.clamp(0.0, 1.0);
    Ok((clamped, clamped != unit))
}

/// Outcome of comparing a VQA reply against the expected answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VqaVerdict {
    Correct,
    Incorrect {
        chosen: String,
    },
    /// The reply matched none of the offered choices; scored as incorrect.
    ChoiceMismatch {
        returned: String,
    },
}

impl VqaVerdict {
    /// Case-insensitive exact match of `reply` against the choice list.
    pub fn judge(pair: &QuestionAnswerPair, reply: &str) -> Self {
        let reply = reply.trim();
        match pair.choices.iter().find(|c| c.trim().eq_ignore_ascii_case(reply)) {
            Some(choice) if choice.trim().eq_ignore_ascii_case(pair.answer.trim()) => VqaVerdict::Correct,
            Some(choice) => VqaVerdict::Incorrect { chosen: choice.clone() },
            None => VqaVerdict::ChoiceMismatch {
                returned: reply.to_string(),
            },
        }
    }

    pub fn is_correct(&self) -> bool {
        matches!(self, VqaVerdict::Correct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        })
    }
}

/// A finetune job as last reported by the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub job_id: String,
    pub spec: FinetuneSpec,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_model_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl FinetuneJob {
    /// Enforces `result_model_version.is_some() == (status == Done)`.
    pub fn new(
        job_id: impl Into<String>,
        spec: FinetuneSpec,
        status: JobStatus,
        result_model_version: Option<String>,
        message: Option<String>,
    ) -> Result<Self, String> {
        let job_id = job_id.into();
        if job_id.is_empty() {
            return Err("job_id must be non-empty".into());
        }
        if result_model_version.is_some() != (status == JobStatus::Done) {
            return Err(format!(
                "job {job_id}: model_version must be present iff status is done (status {status})"
            ));
        }
        Ok(FinetuneJob {
            job_id,
            spec,
            status,
            result_model_version,
            message,
        })
    }
}

/// One handle per role, shareable across worker threads.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn ImageGenerator>,
    pub vqa: Arc<dyn VqaModel>,
    pub aesthetic: Arc<dyn AestheticModel>,
    pub llm: Arc<dyn LanguageModel>,
    pub finetuner: Arc<dyn Finetuner>,
}

impl Backends {
    /// Every role served by one shared simulator.
    pub fn simulated(params: SimulatorParams) -> Self {
        let sim = Arc::new(Simulator::new(params));
        Backends {
            generator: sim.clone(),
            vqa: sim.clone(),
            aesthetic: sim.clone(),
            llm: sim.clone(),
            finetuner: sim,
        }
    }

    pub fn from_config(config: &RunConfig) -> Result<Self, BackendError> {
        let sim = Arc::new(Simulator::new(config.simulator_params()));
        let http = |role: Role| HttpBackend::new(config.endpoints.get(role)).map(Arc::new);

        let endpoint = |role: Role| config.endpoints.get(role);
        let generator: Arc<dyn ImageGenerator> = if endpoint(Role::Generator).is_simulated() {
            sim.clone()
        } else {
            http(Role::Generator)?
        };
        let vqa: Arc<dyn VqaModel> = if endpoint(Role::Vqa).is_simulated() {
            sim.clone()
        } else {
            http(Role::Vqa)?
        };
        let aesthetic: Arc<dyn AestheticModel> = if endpoint(Role::Aesthetic).is_simulated() {
            sim.clone()
        } else {
            http(Role::Aesthetic)?
        };
        let finetuner: Arc<dyn Finetuner> = if endpoint(Role::Finetune).is_simulated() {
            sim.clone()
        } else {
            http(Role::Finetune)?
        };
        let llm_url = endpoint(Role::Llm).settings.url;
        let llm: Arc<dyn LanguageModel> = match llm_url.as_str() {
            u if u.starts_with("sim:") => sim.clone(),
            "echo:" => Arc::new(EchoLlm),
            "empty:" => Arc::new(EmptyLlm),
            u if u.starts_with("replay:") => Arc::new(ReplayLlm::load(&u["replay:".len()..])?),
            _ => http(Role::Llm)?,
        };
        Ok(Backends {
            generator,
            vqa,
            aesthetic,
            llm,
            finetuner,
        })
    }

    pub fn with_llm(mut self, llm: Arc<dyn LanguageModel>) -> Self {
        self.llm = llm;
        self
    }

    pub fn generate_image(&self, prompt: &Prompt, seed: u64, model_version: &str) -> Result<ImageRef, BackendError> {
        let image = self.generator.generate(prompt, seed, model_version)?;
        if image.seed != seed || image.model_version != model_version {
            return Err(BackendError::protocol(
                Role::Generator,
                "returned image does not carry the requested seed/model_version",
            ));
        }
        Ok(image)
    }

    /// `F_j`: queries the VQA role and judges the reply.
    pub fn answer_question(&self, image: &ImageRef, pair: &QuestionAnswerPair) -> Result<VqaVerdict, BackendError> {
        let reply = self.vqa.answer(image, pair)?;
        let verdict = VqaVerdict::judge(pair, &reply);
        if let VqaVerdict::ChoiceMismatch { returned } = &verdict {
            log::warn!(
                "choice mismatch on {}: {:?} is not among {:?} for {:?}",
                image.uri,
                returned,
                pair.choices,
                pair.question
            );
        }
        Ok(verdict)
    }

    /// `V`: normalized aesthetic score in `[0, 1]`.
    pub fn score_aesthetic(&self, image: &ImageRef) -> Result<f64, BackendError> {
        let reading = self.aesthetic.score(image)?;
        let (value, clamped) = normalize_aesthetic(reading)?;
        if clamped {
            log::warn!(
                "aesthetic score {} for {} clamped to {}",
                reading.score,
                image.uri,
                value
            );
        }
        Ok(value)
    }

    pub fn complete_text(&self, instruction: &str, examples: &[String]) -> Result<String, BackendError> {
        self.llm.complete(instruction, examples)
    }

    pub fn submit_finetune(&self, spec: &FinetuneSpec) -> Result<FinetuneJob, BackendError> {
        self.finetuner.submit(spec)
    }

    /// A job reported as failed surfaces as [`BackendError::JobFailed`].
    pub fn poll_finetune(&self, job_id: &str) -> Result<FinetuneJob, BackendError> {
        let job = self.finetuner.poll(job_id)?;
        if job.status == JobStatus::Failed {
            let message = job.message.unwrap_or_else(|| format!("job {job_id} failed"));
            return Err(BackendError::JobFailed(message));
        }
        Ok(job)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AnswerType;

    fn yes_no() -> QuestionAnswerPair {
        QuestionAnswerPair::binary("is there a cat?", "cat", AnswerType::Object)
    }

    #[test]
    fn vqa_match_is_case_insensitive() {
        assert_eq!(VqaVerdict::judge(&yes_no(), "Yes"), VqaVerdict::Correct);
        assert_eq!(VqaVerdict::judge(&yes_no(), " YES "), VqaVerdict::Correct);
        assert_eq!(
            VqaVerdict::judge(&yes_no(), "no"),
            VqaVerdict::Incorrect { chosen: "no".into() }
        );
    }

    #[test]
    fn vqa_reply_outside_choices_is_a_mismatch() {
        let v = VqaVerdict::judge(&yes_no(), "maybe");
        assert_eq!(
            v,
            VqaVerdict::ChoiceMismatch {
                returned: "maybe".into()
            }
        );
        assert!(!v.is_correct());
    }

    #[test]
    fn aesthetic_normalization() {
        let percent = AestheticReading {
            score: 60.9,
            scale: AestheticScale::Percent,
        };
        assert_eq!(normalize_aesthetic(percent).unwrap(), (0.609, false));
        let over = AestheticReading {
            score: 1.3,
            scale: AestheticScale::Unit,
        };
        assert_eq!(normalize_aesthetic(over).unwrap(), (1.0, true));
        let under = AestheticReading {
            score: -0.2,
            scale: AestheticScale::Unit,
        };
        assert_eq!(normalize_aesthetic(under).unwrap(), (0.0, true));
        let nan = AestheticReading {
            score: f64::NAN,
            scale: AestheticScale::Unit,
        };
        assert!(normalize_aesthetic(nan).is_err());
    }

    #[test]
    fn finetune_job_invariant() {
        let spec = FinetuneSpec::new(Default::default(), "store:run/iterations/0/dataset.jsonl", None).unwrap();
        assert!(FinetuneJob::new("j", spec.clone(), JobStatus::Done, Some("G1".into()), None).is_ok());
        assert!(FinetuneJob::new("j", spec.clone(), JobStatus::Done, None, None).is_err());
        assert!(FinetuneJob::new("j", spec, JobStatus::Running, Some("G1".into()), None).is_err());
    }

    #[test]
    fn from_config_builds_stubs_and_sim() {
        let mut config = RunConfig::default();
        config.endpoints.llm.url = "echo:".into();
        let b = Backends::from_config(&config).unwrap();
        assert_eq!(b.complete_text("ignored", &["a".into(), "b".into()]).unwrap(), "a\nb");
        config.endpoints.llm.url = "empty:".into();
        let b = Backends::from_config(&config).unwrap();
        assert_eq!(b.complete_text("x", &[]).unwrap(), "");
    }
}
