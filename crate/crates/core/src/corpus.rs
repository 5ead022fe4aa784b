//! Prompt corpora: JSONL, one prompt with its question set per line.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::types::{Prompt, PromptCategory, PromptSource, QuestionAnswerPair, QuestionSet, ValidationError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("corpus line {line}: duplicate prompt id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("corpus line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub prompt: Prompt,
    pub questions: QuestionSet,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    text: String,
    category: PromptCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<PromptSource>,
    #[serde(default)]
    questions: Vec<QuestionAnswerPair>,
}

impl CorpusEntry {
    pub fn new(prompt: Prompt, pairs: Vec<QuestionAnswerPair>) -> Result<Self, ValidationError> {
        let questions = QuestionSet::new(prompt.id.clone(), pairs)?;
        Ok(CorpusEntry { prompt, questions })
    }

    fn from_line(line: Line) -> Result<Self, ValidationError> {
        let prompt = Prompt::new(
            line.id,
            line.text,
            line.category,
            line.source.unwrap_or(PromptSource::Imported),
        )?;
        CorpusEntry::new(prompt, line.questions)
    }

    fn to_line(&self) -> Line {
        Line {
            id: self.prompt.id.clone(),
            text: self.prompt.text.clone(),
            category: self.prompt.category,
            source: Some(self.prompt.source),
            questions: self.questions.pairs.clone(),
        }
    }
}

/// An ordered collection of prompts with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.prompt.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: e.prompt.id.clone(),
                });
            }
        }
        Ok(Corpus { entries })
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            let entry = CorpusEntry::from_line(line).map_err(|source| CorpusError::Invalid { line: i + 1, source })?;
            entries.push(entry);
        }
        Corpus::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Corpus::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&e.to_line()).expect("corpus line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.prompt.id == id)
    }

    pub fn total_questions(&self) -> usize {
        self.entries.iter().map(|e| e.questions.len()).sum()
    }

    /// Entries usable for filtering and evaluation (at least one question).
    pub fn usable(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| !e.questions.is_empty())
    }
}
