//! Scoring for generated vulnerability verdicts and for human or model
//! ratings of their explanations.

pub mod detection;
pub mod kappa;
pub mod likert;
pub mod report;

pub use detection::{
    detection_metrics, f1_score, majority_vote, parse_label, ConfusionCounts, DetectionMetrics, Predicted, Prediction,
    VoteTally,
};
pub use kappa::{cohen_kappa, Consistency, ContingencyTable, KappaResult};
pub use likert::{
    likert_aggregate, rating_distribution, resolve, AggregateScore, Dimension, Divergence, RatingDistribution,
    RatingRecord, Resolution,
};
pub use moetune_core::data::Label;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: {left} vs {right} items")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("cannot vote over zero samples")]
    NoVotes,
    #[error("rating {score} of item `{item}` is outside {allowed}")]
    Score { item: String, score: u32, allowed: String },
    #[error("kappa is undefined: both raters use a single identical category (expected agreement 1)")]
    UndefinedKappa,
    #[error("item `{item}` ({dimension}) has {raters} rater(s); at least two are required")]
    MissingRater {
        item: String,
        dimension: Dimension,
        raters: usize,
    },
    #[error("{0}")]
    Input(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
