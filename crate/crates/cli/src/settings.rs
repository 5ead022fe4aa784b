//! Config file loading: TOML on disk, dotted `--set` overrides on top.

use std::path::{Path, PathBuf};

use dreamsync::acquisition::{AcquisitionPlan, BatchPlan};
use dreamsync::config::Role;
use dreamsync::{validate_config, PromptCategory, RunConfig};
use serde::Deserialize;

use crate::Failure;

const DEFAULT_PROMPTS_PER_BATCH: usize = 50;

/// The `[acquisition]` table. Everything else in the file is a [`RunConfig`].
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSettings {
    pub prompts_per_batch: usize,
    /// Restricts the bundled batches to these categories; empty keeps all.
    pub categories: Vec<PromptCategory>,
    /// Explicit batches replace the bundled ones entirely.
    pub batches: Vec<BatchPlan>,
    pub templates_dir: Option<PathBuf>,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        AcquisitionSettings {
            prompts_per_batch: DEFAULT_PROMPTS_PER_BATCH,
            categories: Vec::new(),
            batches: Vec::new(),
            templates_dir: None,
        }
    }
}

impl AcquisitionSettings {
    pub fn plan(&self) -> AcquisitionPlan {
        let batches = if self.batches.is_empty() {
            AcquisitionPlan::builtin(self.prompts_per_batch)
                .batches
                .into_iter()
                .filter(|b| self.categories.is_empty() || self.categories.contains(&b.category))
                .collect()
        } else {
            self.batches.clone()
        };
        AcquisitionPlan {
            batches,
            templates_dir: self.templates_dir.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub run: RunConfig,
    pub acquisition: AcquisitionSettings,
}

/// Reads `path` (or starts from defaults), applies `overrides` and `seed`,
/// resolves relative paths against the config file's directory, and validates.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Settings, Failure> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Failure::usage(format!("{}: {}", p.display(), e.message())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }

    let acquisition = match table.remove("acquisition") {
        Some(v) => v
            .try_into::<AcquisitionSettings>()
            .map_err(|e| Failure::usage(format!("acquisition: {}", e.message())))?,
        None => AcquisitionSettings::default(),
    };
    check_known_keys(&table)?;
    let mut run: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::usage(format!("config: {}", e.message())))?;
    if let Some(seed) = seed {
        run.seed = seed;
    }

    run.corpus = run.corpus.map(|p| base.join(p));
    run.eval_corpus = run.eval_corpus.map(|p| base.join(p));
    let mut llm = run.endpoints.get(Role::Llm).settings;
    if let Some(rest) = llm.url.strip_prefix("replay:") {
        llm.url = format!("replay:{}", base.join(rest).display());
        run.endpoints.set(Role::Llm, llm);
    }
    let mut acquisition = acquisition;
    acquisition.templates_dir = acquisition.templates_dir.map(|p| base.join(p));

    let run = validate_config(run).map_err(|e| {
        let lines: Vec<String> =
            e.0.violations
                .iter()
                .map(|v| format!("  {}: {}", v.field, v.message))
                .collect();
        Failure::usage(format!("invalid config:\n{}", lines.join("\n")))
    })?;
    Ok(Settings { run, acquisition })
}

/// `a.b.c=value`; the value is read as TOML, falling back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), Failure> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("--set {item:?}: expected KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::usage(format!("--set {item:?}: empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for part in parents {
        let slot = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = slot
            .as_table_mut()
            .ok_or_else(|| Failure::usage(format!("--set {item:?}: {part} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn check_known_keys(table: &toml::Table) -> Result<(), Failure> {
    let known = match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    let optional = ["run_id", "simulator", "corpus", "eval_corpus"];
    let unknown: Vec<String> = table
        .keys()
        .filter(|k| !known.contains_key(k.as_str()) && !optional.contains(&k.as_str()))
        .map(|k| format!("  {k}: unknown key"))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Failure::usage(format!("invalid config:\n{}", unknown.join("\n"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "max_iterations = 2\n[thresholds]\ntheta_faithful = 0.8\n");
        let s = load(
            Some(&path),
            &[
                "thresholds.theta_aesthetic=0.5".into(),
                "base_model_version=sim-G1".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(s.run.max_iterations, 2);
        assert_eq!(s.run.thresholds.theta_faithful, 0.8);
        assert_eq!(s.run.thresholds.theta_aesthetic, 0.5);
        assert_eq!(s.run.base_model_version, "sim-G1");
        assert_eq!(s.run.seed, 9);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "corpus = \"data/c.jsonl\"\n[endpoints.llm]\nurl = \"replay:r.json\"\n[acquisition]\ntemplates_dir = \"t\"\n",
        );
        let s = load(Some(&path), &[], None).unwrap();
        assert_eq!(s.run.corpus.unwrap(), dir.path().join("data/c.jsonl"));
        assert_eq!(
            s.run.endpoints.get(Role::Llm).settings.url,
            format!("replay:{}", dir.path().join("r.json").display())
        );
        assert_eq!(s.acquisition.templates_dir.unwrap(), dir.path().join("t"));
    }

    #[test]
    fn unknown_and_invalid_fields_are_reported_by_name() {
        let err = load(None, &["max_iteratons=3".into()], None).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USAGE);
        assert!(err.message.contains("max_iteratons"), "{}", err.message);

        let err = load(None, &["samples_per_prompt=0".into(), "eval_seeds=[]".into()], None).unwrap_err();
        assert!(err.message.contains("samples_per_prompt"), "{}", err.message);
        assert!(err.message.contains("eval_seeds"), "{}", err.message);
    }

    #[test]
    fn category_filter_narrows_the_bundled_batches() {
        let s = load(None, &["acquisition.categories=[\"food\"]".into()], None).unwrap();
        let plan = s.acquisition.plan();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].category, PromptCategory::Food);
    }

    #[test]
    fn bundled_example_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/simulated.toml");
        let s = load(Some(&path), &[], None).unwrap();
        assert!(s.run.uses_simulator());
        assert!(s.run.corpus.unwrap().is_file());
        assert!(s.run.eval_corpus.unwrap().is_file());
    }
}
