//! Self-training orchestration for text-to-image generators.
//!
//! Each iteration samples candidate images per prompt, scores them with a
//! VQA model against prompt-derived question-answer pairs and with an
//! aesthetic model, keeps the best passing candidate per prompt, and hands
//! the curated set to a LoRA finetune backend to produce the next model.

pub mod acquisition;
pub mod backends;
pub mod benchmark;
pub mod config;
pub mod corpus;
pub mod decimal;
pub mod pipeline;
pub mod scoring;
pub mod store;
pub mod types;

pub use config::{validate_config, RunConfig};
pub use types::*;
