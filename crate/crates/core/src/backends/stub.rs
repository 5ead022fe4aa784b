//! Offline language-model stand-ins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, LanguageModel};
use crate::config::Role;

/// Replies with the examples, one per line, or the instruction when none are given.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoLlm;

impl LanguageModel for EchoLlm {
    fn complete(&self, instruction: &str, examples: &[String]) -> Result<String, BackendError> {
        if examples.is_empty() {
            Ok(instruction.to_string())
        } else {
            Ok(examples.join("\n"))
        }
    }
}

/// Always replies with an empty completion.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyLlm;

impl LanguageModel for EmptyLlm {
    fn complete(&self, _instruction: &str, _examples: &[String]) -> Result<String, BackendError> {
        Ok(String::new())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRule {
    /// Substring the instruction must contain; absent matches everything.
    #[serde(default)]
    pub contains: Option<String>,
    pub completion: String,
}

/// Scripted replies: the first rule whose `contains` occurs in the instruction wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayLlm {
    rules: Vec<ReplayRule>,
}

impl ReplayLlm {
    pub fn new(rules: Vec<ReplayRule>) -> Self {
        ReplayLlm { rules }
    }

    /// Reads a JSON array of rules.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let setup = |message: String| BackendError::Setup {
            role: Role::Llm,
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| setup(format!("{}: {e}", path.display())))?;
        let rules = serde_json::from_str(&text).map_err(|e| setup(format!("{}: {e}", path.display())))?;
        Ok(ReplayLlm { rules })
    }
}

impl LanguageModel for ReplayLlm {
    fn complete(&self, instruction: &str, _examples: &[String]) -> Result<String, BackendError> {
        let hit = self
            .rules
            .iter()
            .find(|r| r.contains.as_deref().is_none_or(|needle| instruction.contains(needle)));
        Ok(hit.map(|r| r.completion.clone()).unwrap_or_default())
    }
}
