//! JSON bodies exchanged with remote model services.
//!
//! Every role is a POST of one request object to `<base>/<role path>`,
//! except finetune polling which is `GET <base>/finetune/<job_id>`.
//! Failures carry an [`ErrorBody`] with a non-2xx status.

use serde::{Deserialize, Serialize};

use crate::backends::JobStatus;
use crate::types::FinetuneSpec;

pub const GENERATE_PATH: &str = "/generate";
pub const VQA_PATH: &str = "/vqa";
pub const AESTHETIC_PATH: &str = "/aesthetic";
pub const LLM_PATH: &str = "/llm";
pub const FINETUNE_PATH: &str = "/finetune";

pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_LORA_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt_text: String,
    pub seed: u64,
    pub model_version: String,
    pub steps: u32,
    pub lora_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image_uri: String,
    pub question: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AestheticRequest {
    pub image_uri: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AestheticScale {
    #[default]
    Unit,
    Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AestheticResponse {
    pub score: f64,
    #[serde(default)]
    pub scale: AestheticScale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub instruction: String,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub completion: String,
}

/// The finetune request body is the serialized [`FinetuneSpec`].
pub type FinetuneRequest = FinetuneSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSubmitResponse {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneStatusResponse {
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl GenerateRequest {
    pub fn new(prompt_text: &str, seed: u64, model_version: &str) -> Self {
        GenerateRequest {
            prompt_text: prompt_text.to_string(),
            seed,
            model_version: model_version.to_string(),
            steps: DEFAULT_STEPS,
            lora_alpha: DEFAULT_LORA_ALPHA,
        }
    }
}
