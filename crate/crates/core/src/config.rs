//! Run configuration and its validation.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::benchmark::SuiteName;
use crate::scoring::UnaskedPolicy;
use crate::types::{FilterThresholds, FinetuneHyperparams, SimulatorParams, ValidationError};

/// The five external model roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Vqa,
    Aesthetic,
    Llm,
    Finetune,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Generator, Role::Vqa, Role::Aesthetic, Role::Llm, Role::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Vqa => "vqa",
            Role::Aesthetic => "aesthetic",
            Role::Llm => "llm",
            Role::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Connection settings for one role, as written in a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointSettings {
    /// `http(s)://…` for a remote service, `sim:` for the in-process
    /// simulator, or one of the LLM stubs (`echo:`, `empty:`, `replay:<file>`).
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointSettings {
    fn default() -> Self {
        EndpointSettings {
            url: "sim:".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            backoff_ms: 200,
            max_in_flight: 8,
        }
    }
}

/// An endpoint bound to its role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendEndpoint {
    pub role: Role,
    pub settings: EndpointSettings,
}

impl BackendEndpoint {
    pub fn new(role: Role, url: impl Into<String>) -> Self {
        BackendEndpoint {
            role,
            settings: EndpointSettings {
                url: url.into(),
                ..EndpointSettings::default()
            },
        }
    }

    pub fn is_simulated(&self) -> bool {
        self.settings.url.starts_with("sim:")
    }

    pub fn check(&self) -> ValidationError {
        let mut errors = ValidationError::new();
        let s = &self.settings;
        if s.timeout_ms == 0 {
            errors.push("timeout_ms", "must be > 0");
        }
        if s.max_in_flight == 0 {
            errors.push("max_in_flight", "must be >= 1");
        }
        let url = s.url.as_str();
        let known = url.starts_with("sim:") || url.starts_with("http://") || url.starts_with("https://");
        let llm_stub = url == "echo:" || url == "empty:" || url.strip_prefix("replay:").is_some_and(|p| !p.is_empty());
        if !(known || (self.role == Role::Llm && llm_stub)) {
            errors.push("url", format!("unsupported endpoint {url:?} for role {}", self.role));
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub generator: EndpointSettings,
    pub vqa: EndpointSettings,
    pub aesthetic: EndpointSettings,
    pub llm: EndpointSettings,
    pub finetune: EndpointSettings,
}

impl Endpoints {
    pub fn get(&self, role: Role) -> BackendEndpoint {
        let settings = match role {
            Role::Generator => &self.generator,
            Role::Vqa => &self.vqa,
            Role::Aesthetic => &self.aesthetic,
            Role::Llm => &self.llm,
            Role::Finetune => &self.finetune,
        };
        BackendEndpoint {
            role,
            settings: settings.clone(),
        }
    }

    pub fn set(&mut self, role: Role, settings: EndpointSettings) {
        let slot = match role {
            Role::Generator => &mut self.generator,
            Role::Vqa => &mut self.vqa,
            Role::Aesthetic => &mut self.aesthetic,
            Role::Llm => &mut self.llm,
            Role::Finetune => &mut self.finetune,
        };
        *slot = settings;
    }
}

/// How each iteration's prompt subset is drawn from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    /// A fresh uniform sample every iteration.
    #[default]
    Fresh,
    /// Consecutive slices of one fixed shuffle; subsets never overlap.
    Disjoint,
    /// The iteration-0 subset, reused every iteration.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Caller-chosen run identifier; derived from the config when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Seeds prompt subset sampling.
    pub seed: u64,
    /// Candidates per prompt during training (`K`).
    pub samples_per_prompt: usize,
    pub prompts_per_iteration: usize,
    pub max_iterations: usize,
    pub thresholds: FilterThresholds,
    /// Seeds used for evaluation; distinct from the training seed ladder.
    pub eval_seeds: Vec<u64>,
    pub endpoints: Endpoints,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorParams>,
    pub base_model_version: String,
    /// Training corpus (JSONL).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Evaluation corpus; when present every model version is benchmarked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<PathBuf>,
    pub eval_suite: SuiteName,
    pub resample_policy: ResamplePolicy,
    /// Stop once the iteration-over-iteration gain in mean score drops below this.
    pub convergence_epsilon: f64,
    /// Abort an iteration when more than this fraction of prompts fail sampling.
    pub abort_fraction: f64,
    /// Concurrent prompts in flight.
    pub workers: usize,
    pub unasked_policy: UnaskedPolicy,
    pub finetune: FinetuneHyperparams,
    pub finetune_poll_interval_ms: u64,
    pub finetune_max_polls: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: None,
            seed: 0,
            samples_per_prompt: 8,
            prompts_per_iteration: 10_000,
            max_iterations: 3,
            thresholds: FilterThresholds::default(),
            eval_seeds: vec![0, 1, 2, 3],
            endpoints: Endpoints::default(),
            simulator: None,
            base_model_version: "sim-G0".into(),
            corpus: None,
            eval_corpus: None,
            eval_suite: SuiteName::Tifa,
            resample_policy: ResamplePolicy::Fresh,
            convergence_epsilon: 0.002,
            abort_fraction: 0.5,
            workers: 8,
            unasked_policy: UnaskedPolicy::ScoreZero,
            finetune: FinetuneHyperparams::default(),
            finetune_poll_interval_ms: 1_000,
            finetune_max_polls: 86_400,
        }
    }
}

impl RunConfig {
    /// Simulator parameters in effect (explicit or default).
    pub fn simulator_params(&self) -> SimulatorParams {
        self.simulator.clone().unwrap_or_default()
    }

    pub fn uses_simulator(&self) -> bool {
        Role::ALL.iter().any(|&r| self.endpoints.get(r).is_simulated())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct InvalidConfig(pub ValidationError);

/// Returns the config iff every invariant holds, else every violation.
pub fn validate_config(config: RunConfig) -> Result<RunConfig, InvalidConfig> {
    let mut errors = ValidationError::new();
    if config.samples_per_prompt < 1 {
        errors.push("samples_per_prompt", "samples_per_prompt must be ≥ 1");
    }
    if config.prompts_per_iteration < 1 {
        errors.push("prompts_per_iteration", "prompts_per_iteration must be ≥ 1");
    }
    if config.max_iterations < 1 {
        errors.push("max_iterations", "max_iterations must be ≥ 1");
    }
    errors.extend_prefixed("thresholds", config.thresholds.check());
    if config.eval_seeds.is_empty() {
        errors.push("eval_seeds", "eval_seeds must be non-empty");
    }
    let mut seen = HashSet::new();
    if config.eval_seeds.iter().any(|s| !seen.insert(*s)) {
        errors.push("eval_seeds", "eval_seeds must be distinct");
    }
    for role in Role::ALL {
        errors.extend_prefixed(&format!("endpoints.{role}"), config.endpoints.get(role).check());
    }
    if let Some(sim) = &config.simulator {
        errors.extend_prefixed("simulator", sim.check());
    }
    if config.base_model_version.trim().is_empty() {
        errors.push("base_model_version", "must be non-empty");
    }
    if let Some(id) = &config.run_id {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            errors.push("run_id", "must be a plain, non-empty directory name");
        }
    }
    if !(config.convergence_epsilon.is_finite() && config.convergence_epsilon >= 0.0) {
        errors.push("convergence_epsilon", "must be a non-negative real");
    }
    if !(0.0..=1.0).contains(&config.abort_fraction) {
        errors.push("abort_fraction", "must lie in [0, 1]");
    }
    if config.workers < 1 {
        errors.push("workers", "must be ≥ 1");
    }
    errors.extend_prefixed("finetune", config.finetune.check());
    if config.finetune_max_polls < 1 {
        errors.push("finetune_max_polls", "must be ≥ 1");
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(InvalidConfig(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_reference_recipe() {
        let c = validate_config(RunConfig::default()).unwrap();
        assert_eq!(c.samples_per_prompt, 8);
        assert_eq!(c.prompts_per_iteration, 10_000);
        assert_eq!(c.max_iterations, 3);
        assert_eq!(
            c.thresholds,
            FilterThresholds {
                theta_faithful: 0.9,
                theta_aesthetic: 0.6
            }
        );
        assert_eq!(c.eval_seeds.len(), 4);
    }

    #[test]
    fn zero_samples_is_rejected() {
        let err = validate_config(RunConfig {
            samples_per_prompt: 0,
            ..Default::default()
        })
        .unwrap_err();
        assert!(err
            .0
            .violations
            .iter()
            .any(|v| v.message == "samples_per_prompt must be ≥ 1"));
    }

    #[test]
    fn threshold_out_of_range_is_reported_on_thresholds() {
        let mut c = RunConfig::default();
        c.thresholds.theta_faithful = 1.2;
        let err = validate_config(c).unwrap_err();
        assert!(err.0.mentions("thresholds.theta_faithful"));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut c = RunConfig {
            samples_per_prompt: 0,
            max_iterations: 0,
            eval_seeds: vec![],
            ..Default::default()
        };
        c.thresholds.theta_aesthetic = -0.1;
        c.endpoints.vqa.url = "ftp://nowhere".into();
        c.endpoints.generator.timeout_ms = 0;
        let err = validate_config(c).unwrap_err();
        for field in [
            "samples_per_prompt",
            "max_iterations",
            "eval_seeds",
            "thresholds.theta_aesthetic",
            "endpoints.vqa.url",
            "endpoints.generator.timeout_ms",
        ] {
            assert!(err.0.mentions(field), "missing {field}: {err}");
        }
    }

    #[test]
    fn stub_urls_only_valid_for_llm() {
        let mut c = RunConfig::default();
        c.endpoints.llm.url = "echo:".into();
        assert!(validate_config(c.clone()).is_ok());
        c.endpoints.vqa.url = "echo:".into();
        assert!(validate_config(c).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig {
            simulator: Some(SimulatorParams::default()),
            corpus: Some("corpus.jsonl".into()),
            ..Default::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
