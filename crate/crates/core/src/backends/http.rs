use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backends::retry::{Attempt, InFlight, RetryPolicy};
use crate::backends::wire::*;
use crate::backends::{
    AestheticModel, AestheticReading, BackendError, FinetuneJob, Finetuner, ImageGenerator, JobStatus, LanguageModel,
    VqaModel,
};
use crate::config::{BackendEndpoint, Role};
use crate::types::{FinetuneSpec, ImageRef, Prompt, QuestionAnswerPair};

/// Blocking JSON-over-HTTP client for one endpoint.
pub struct HttpBackend {
    role: Role,
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    gate: InFlight,
    jobs: Mutex<HashMap<String, FinetuneSpec>>,
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        let problems = endpoint.check();
        if !problems.is_empty() {
            return Err(BackendError::Setup {
                role: endpoint.role,
                message: problems.to_string(),
            });
        }
        let settings = endpoint.settings;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            role: endpoint.role,
            base: settings.url.trim_end_matches('/').to_string(),
            agent,
            retry: RetryPolicy::from_settings(&settings),
            gate: InFlight::new(settings.max_in_flight),
            jobs: Mutex::new(HashMap::new()),
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let _permit = self.gate.acquire();
        self.retry.run(self.role, |_| {
            let sent = self.agent.post(&url).send_json(body);
            self.interpret(sent, path)
        })
    }

    fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let _permit = self.gate.acquire();
        self.retry.run(self.role, |_| {
            let sent = self.agent.get(&url).call();
            self.interpret(sent, path)
        })
    }

    fn interpret<R: DeserializeOwned>(
        &self,
        sent: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
        path: &str,
    ) -> Attempt<R> {
        let response = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let text = match response.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading response body: {e}")),
        };
        if (200..300).contains(&status) {
            return match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(BackendError::protocol(
                    self.role,
                    format!("malformed {path} response: {e}"),
                )),
            };
        }
        let error = serde_json::from_str::<ErrorBody>(&text).unwrap_or_else(|_| ErrorBody {
            code: format!("http_{status}"),
            message: text.trim().to_string(),
        });
        if status >= 500 || status == 408 || status == 429 {
            return Attempt::Retry(format!("HTTP {status} {}: {}", error.code, error.message));
        }
        Attempt::Fail(match self.role {
            Role::Generator => BackendError::GenerationRejected(error.message),
            Role::Finetune if status == 404 => BackendError::JobFailed("unknown job".into()),
            role => BackendError::Rejected {
                role,
                code: error.code,
                message: error.message,
            },
        })
    }
}

impl ImageGenerator for HttpBackend {
    fn generate(&self, prompt: &Prompt, seed: u64, model_version: &str) -> Result<ImageRef, BackendError> {
        let reply: GenerateResponse =
            self.post(GENERATE_PATH, &GenerateRequest::new(&prompt.text, seed, model_version))?;
        ImageRef::new(reply.image_uri, seed, model_version)
            .map_err(|e| BackendError::protocol(self.role, e.to_string()))
    }
}

impl VqaModel for HttpBackend {
    fn answer(&self, image: &ImageRef, pair: &QuestionAnswerPair) -> Result<String, BackendError> {
        let request = VqaRequest {
            image_uri: image.uri.clone(),
            question: pair.question.clone(),
            choices: pair.choices.clone(),
        };
        let reply: VqaResponse = self.post(VQA_PATH, &request)?;
        Ok(reply.answer)
    }
}

impl AestheticModel for HttpBackend {
    fn score(&self, image: &ImageRef) -> Result<AestheticReading, BackendError> {
        let request = AestheticRequest {
            image_uri: image.uri.clone(),
        };
        let reply: AestheticResponse = self.post(AESTHETIC_PATH, &request)?;
        Ok(AestheticReading {
            score: reply.score,
            scale: reply.scale,
        })
    }
}

impl LanguageModel for HttpBackend {
    fn complete(&self, instruction: &str, examples: &[String]) -> Result<String, BackendError> {
        let request = LlmRequest {
            instruction: instruction.to_string(),
            examples: examples.to_vec(),
        };
        let reply: LlmResponse = self.post(LLM_PATH, &request)?;
        Ok(reply.completion)
    }
}

impl Finetuner for HttpBackend {
    fn submit(&self, spec: &FinetuneSpec) -> Result<FinetuneJob, BackendError> {
        let reply: FinetuneSubmitResponse = self.post(FINETUNE_PATH, spec)?;
        if reply.job_id.is_empty() {
            return Err(BackendError::protocol(self.role, "empty job_id"));
        }
        self.jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(reply.job_id.clone(), spec.clone());
        FinetuneJob::new(reply.job_id, spec.clone(), JobStatus::Queued, None, None)
            .map_err(|e| BackendError::protocol(self.role, e))
    }

    fn poll(&self, job_id: &str) -> Result<FinetuneJob, BackendError> {
        let spec = self
            .jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(job_id)
            .cloned()
            .ok_or_else(|| BackendError::JobFailed("unknown job".into()))?;
        let reply: FinetuneStatusResponse = self.get(&format!("{FINETUNE_PATH}/{job_id}"))?;
        FinetuneJob::new(job_id, spec, reply.status, reply.model_version, reply.message)
            .map_err(|e| BackendError::protocol(self.role, e))
    }
}
