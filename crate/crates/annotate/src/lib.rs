//! Explanation dataset construction: two generators draft explanations, a
//! judge scores them, and a reviewer group for the vulnerability family
//! verifies, refines or rejects the best one. Every model or human role is a
//! trait so runs can use scripted or replayed clients.

pub mod mock;
pub mod pipeline;
pub mod prompt;

use moetune_core::data::VulnType;
use serde::{Deserialize, Serialize};

pub use pipeline::{
    evaluate_explanations, expert_verification, generate_explanations, run_pipeline, AuditTrail, Clients, Generated,
    ItemStatus, PipelineOptions, PipelineReport, ReviewerGroup, SourceItem, Verification, AUDIT_SCHEMA,
};
pub use prompt::render_prompt;

/// Minimum judge score for a candidate to reach expert review.
pub const ACCEPT_THRESHOLD: f64 = 6.0;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no reviewer group for `{0}`")]
    NoGroup(VulnType),
    #[error("judge returned {got} scores for {want} candidates")]
    JudgeArity { want: usize, got: usize },
    #[error("score {value} for {dimension} is outside 1..=10")]
    Score { dimension: &'static str, value: u32 },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Failure reported by an external model or reviewer client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{client}: {message}")]
pub struct ClientError {
    pub client: String,
    pub message: String,
}

impl ClientError {
    pub fn new(client: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            client: client.into(),
            message: message.into(),
        }
    }
}

/// Which of the two generator slots produced a candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    GeneratorA,
    GeneratorB,
}

impl Source {
    pub const BOTH: [Source; 2] = [Source::GeneratorA, Source::GeneratorB];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationCandidate {
    pub source: Source,
    pub item_id: String,
    pub vulnerability_type: VulnType,
    pub text: String,
}

/// Judge scores on a 1-10 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub correctness: u32,
    pub completeness: u32,
    pub conciseness: u32,
    /// Supplied by the judge, or the mean of the three dimensions.
    pub overall: f64,
    pub rationale: String,
}

impl QualityScore {
    /// Score whose overall is the mean of the three dimensions.
    pub fn new(correctness: u32, completeness: u32, conciseness: u32, rationale: impl Into<String>) -> Result<Self> {
        let s = Self {
            correctness,
            completeness,
            conciseness,
            overall: (correctness + completeness + conciseness) as f64 / 3.0,
            rationale: rationale.into(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Every dimension scored `s`.
    pub fn uniform(s: u32) -> Result<Self> {
        Self::new(s, s, s, "")
    }

    pub fn validate(&self) -> Result<()> {
        for (dimension, value) in [
            ("correctness", self.correctness),
            ("completeness", self.completeness),
            ("conciseness", self.conciseness),
        ] {
            if !(1..=10).contains(&value) {
                return Err(Error::Score { dimension, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Accept,
    NeedsRefinement,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub reviewer: String,
    pub verdict: Verdict,
    pub feedback: String,
}

/// Result of the group discussion held when reviewers disagree or find a
/// serious error.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub participants: Vec<String>,
    /// `Accept` or `Reject`.
    pub decision: Verdict,
    /// Text agreed on when accepted, possibly edited.
    pub text: Option<String>,
    pub note: String,
}

pub trait Generator {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str) -> std::result::Result<String, ClientError>;
}

pub trait Judge {
    fn name(&self) -> &str;
    /// One score per candidate, in order.
    fn evaluate(
        &self,
        code: &str,
        candidates: &[ExplanationCandidate],
    ) -> std::result::Result<Vec<QualityScore>, ClientError>;
}

pub trait Reviewer {
    fn name(&self) -> &str;
    fn review(&self, code: &str, candidate: &ExplanationCandidate) -> std::result::Result<Review, ClientError>;
}

pub trait Refiner {
    fn name(&self) -> &str;
    fn refine(&self, code: &str, text: &str, reviews: &[Review]) -> std::result::Result<String, ClientError>;
}

pub trait Consensus {
    /// `None` when the group cannot agree; the item is then held back.
    fn resolve(
        &self,
        code: &str,
        text: &str,
        reviews: &[Review],
    ) -> std::result::Result<Option<ConsensusRecord>, ClientError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_defaults_to_mean() {
        let s = QualityScore::new(6, 7, 8, "fine").unwrap();
        assert_eq!(s.overall, 7.0);
        assert!(QualityScore::new(0, 7, 8, "").is_err());
        assert!(QualityScore::uniform(11).is_err());
    }
}
