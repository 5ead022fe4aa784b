//! Faithfulness scoring and best-of-K selection.
//!
//! Everything in here is a pure function over booleans and already-scored
//! candidates; model calls happen in [`crate::backends`].

use std::borrow::Borrow;
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::types::{FilterThresholds, QuestionSet, ScoredCandidate};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoringError {
    #[error("no question results to score")]
    EmptyResults,
    #[error("no candidate passed the filters")]
    EmptySelection,
    #[error("question dependencies contain a cycle")]
    CyclicDependency,
    #[error("dependency index {parent} out of range for {len} questions")]
    DanglingDependency { parent: usize, len: usize },
    #[error("{answers} answers supplied for {questions} questions")]
    MisalignedAnswers { answers: usize, questions: usize },
    #[error("unknown rating {0:?} (expected YES, NO or UNSURE)")]
    UnknownRating(String),
    #[error("item {item} has {got} ratings, expected {expected}")]
    RaggedRatings { item: usize, got: usize, expected: usize },
}

/// `S_M`: fraction of questions answered correctly.
///
/// Computed as a single integer count divided once, so there is no
/// accumulated float error regardless of `N_T`.
pub fn mean_score(results: &[bool]) -> Result<f64, ScoringError> {
    if results.is_empty() {
        return Err(ScoringError::EmptyResults);
    }
    let correct = results.iter().filter(|&&r| r).count();
    Ok(correct as f64 / results.len() as f64)
}

/// `S_A`: 1 iff every question is answered correctly.
pub fn absolute_score(results: &[bool]) -> Result<u8, ScoringError> {
    if results.is_empty() {
        return Err(ScoringError::EmptyResults);
    }
    Ok(results.iter().all(|&r| r) as u8)
}

/// `C(T)`: candidates passing both the faithfulness (on `S_M`) and the
/// aesthetic threshold, in input order. May be empty.
pub fn filter_candidates<'a>(
    candidates: &'a [ScoredCandidate],
    thresholds: &FilterThresholds,
) -> Vec<&'a ScoredCandidate> {
    candidates.iter().filter(|c| thresholds.admits(c)).collect()
}

/// `Î_T`: the passing candidate with the highest aesthetic score.
///
/// Ties go to the lowest seed, then to the lowest position in `passing`.
pub fn select_representative<C: Borrow<ScoredCandidate>>(passing: &[C]) -> Result<&C, ScoringError> {
    let mut best: Option<&C> = None;
    for candidate in passing {
        let c = candidate.borrow();
        best = match best {
            None => Some(candidate),
            Some(current) => {
                let b = current.borrow();
                let better = c.aesthetic > b.aesthetic || (c.aesthetic == b.aesthetic && c.seed() < b.seed());
                Some(if better { candidate } else { current })
            }
        };
    }
    best.ok_or(ScoringError::EmptySelection)
}

/// How questions suppressed by a failed parent enter the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaskedPolicy {
    /// Counted as incorrect; the denominator stays `N_T`.
    #[default]
    ScoreZero,
    /// Dropped from the denominator.
    Exclude,
}

/// Result of dependency-aware grading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsgGrade {
    pub asked: Vec<bool>,
    pub correct: Vec<bool>,
    pub score: f64,
}

impl DsgGrade {
    pub fn all_correct(&self) -> bool {
        self.correct.iter().all(|&c| c)
    }
}

/// Kahn's algorithm; returns `CyclicDependency` when no full order exists.
pub fn topological_order(parents: &[Vec<usize>]) -> Result<Vec<usize>, ScoringError> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for (child, ps) in parents.iter().enumerate() {
        for &p in ps {
            if p >= n {
                return Err(ScoringError::DanglingDependency { parent: p, len: n });
            }
            indegree[child] += 1;
            children[p].push(child);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(node) = ready.pop_front() {
        order.push(node);
        for &child in &children[node] {
            indegree[child] -= 1;
            if indegree[child] == 0 {
                ready.push_back(child);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(ScoringError::CyclicDependency)
    }
}

/// Dependency-aware grading over an arbitrary parent list.
///
/// A question is asked iff every parent was asked and answered correctly.
/// `raw_answers[j]` is only read for asked questions; `None` there means
/// the answerer gave nothing and counts as incorrect.
pub fn grade_dependency_graph(
    parents: &[Vec<usize>],
    raw_answers: &[Option<bool>],
    policy: UnaskedPolicy,
) -> Result<DsgGrade, ScoringError> {
    if parents.len() != raw_answers.len() {
        return Err(ScoringError::MisalignedAnswers {
            answers: raw_answers.len(),
            questions: parents.len(),
        });
    }
    if parents.is_empty() {
        return Err(ScoringError::EmptyResults);
    }
    let order = topological_order(parents)?;
    let n = parents.len();
    let mut asked = vec![false; n];
    let mut correct = vec![false; n];
    for node in order {
        asked[node] = parents[node].iter().all(|&p| asked[p] && correct[p]);
        correct[node] = asked[node] && raw_answers[node] == Some(true);
    }
    let hits = correct.iter().filter(|&&c| c).count();
    let denominator = match policy {
        UnaskedPolicy::ScoreZero => n,
        UnaskedPolicy::Exclude => asked.iter().filter(|&&a| a).count(),
    };
    let score = if denominator == 0 {
        0.0
    } else {
        hits as f64 / denominator as f64
    };
    Ok(DsgGrade { asked, correct, score })
}

pub fn grade_dsg(
    qs: &QuestionSet,
    raw_answers: &[Option<bool>],
    policy: UnaskedPolicy,
) -> Result<DsgGrade, ScoringError> {
    grade_dependency_graph(&qs.parents(), raw_answers, policy)
}

/// A human rater's raw response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HumanAnswer {
    Yes,
    No,
    Unsure,
}

impl HumanAnswer {
    /// YES earns full credit, UNSURE half, NO nothing.
    pub fn points(self) -> f64 {
        match self {
            HumanAnswer::Yes => 1.0,
            HumanAnswer::No => 0.0,
            HumanAnswer::Unsure => 0.5,
        }
    }
}

impl FromStr for HumanAnswer {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "YES" => Ok(HumanAnswer::Yes),
            "NO" => Ok(HumanAnswer::No),
            "UNSURE" => Ok(HumanAnswer::Unsure),
            _ => Err(ScoringError::UnknownRating(s.to_string())),
        }
    }
}

impl fmt::Display for HumanAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HumanAnswer::Yes => "YES",
            HumanAnswer::No => "NO",
            HumanAnswer::Unsure => "UNSURE",
        })
    }
}

/// Converted rating for one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanRating {
    pub answer: HumanAnswer,
    pub points: f64,
}

pub fn convert_human_rating(token: &str) -> Result<HumanRating, ScoringError> {
    let answer: HumanAnswer = token.parse()?;
    Ok(HumanRating {
        answer,
        points: answer.points(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    /// Mean converted points per item.
    pub item_means: Vec<f64>,
    /// Fraction of items on which every rater gave the same raw answer.
    pub agreement: f64,
}

pub fn aggregate_majority(ratings: &[Vec<HumanAnswer>], raters_per_item: usize) -> Result<RatingSummary, ScoringError> {
    let mut item_means = Vec::with_capacity(ratings.len());
    let mut unanimous = 0usize;
    for (item, responses) in ratings.iter().enumerate() {
        if responses.len() != raters_per_item || raters_per_item == 0 {
            return Err(ScoringError::RaggedRatings {
                item,
                got: responses.len(),
                expected: raters_per_item,
            });
        }
        let total: f64 = responses.iter().map(|a| a.points()).sum();
        item_means.push(total / responses.len() as f64);
        if responses.iter().all(|a| *a == responses[0]) {
            unanimous += 1;
        }
    }
    let agreement = if ratings.is_empty() {
        0.0
    } else {
        unanimous as f64 / ratings.len() as f64
    };
    Ok(RatingSummary { item_means, agreement })
}
