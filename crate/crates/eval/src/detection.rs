use serde::{Deserialize, Serialize};

use crate::{Error, Label, Result};

/// A label read back from generated text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicted {
    Vulnerable,
    Safe,
    Unparseable,
}

impl From<Label> for Predicted {
    fn from(l: Label) -> Self {
        match l {
            Label::Vulnerable => Predicted::Vulnerable,
            Label::Safe => Predicted::Safe,
        }
    }
}

fn keyword(word: &str) -> Option<Predicted> {
    match word.to_ascii_lowercase().as_str() {
        "vulnerable" => Some(Predicted::Vulnerable),
        "safe" => Some(Predicted::Safe),
        _ => None,
    }
}

/// Reads the verdict of one generation. The first line of the form
/// `LABEL: Vulnerable|Safe` (any case) decides; otherwise the first whole
/// word `vulnerable` or `safe` anywhere in the text.
pub fn parse_label(text: &str) -> Predicted {
    for line in text.lines() {
        let line = line.trim();
        if line.len() >= 6 && line[..6].eq_ignore_ascii_case("label:") {
            if let Some(p) = line[6..]
                .split_whitespace()
                .next()
                .and_then(|w| keyword(w.trim_end_matches('.')))
            {
                return p;
            }
        }
    }
    text.split(|c: char| !c.is_ascii_alphabetic())
        .find_map(keyword)
        .unwrap_or(Predicted::Unparseable)
}

/// Text after the first `EXPLANATION:` marker, or the whole text if there is
/// none.
pub fn parse_explanation(text: &str) -> String {
    let lower = text.to_ascii_lowercase();
    match lower.find("explanation:") {
        Some(i) => text[i + "explanation:".len()..].trim().to_string(),
        None => text.trim().to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub vulnerable: usize,
    pub safe: usize,
    pub unparseable: usize,
}

impl VoteTally {
    pub fn of(labels: &[Predicted]) -> Self {
        let mut t = Self::default();
        for l in labels {
            match l {
                Predicted::Vulnerable => t.vulnerable += 1,
                Predicted::Safe => t.safe += 1,
                Predicted::Unparseable => t.unparseable += 1,
            }
        }
        t
    }

    /// Modal label. Ties go to `Vulnerable`, then `Safe`.
    pub fn winner(&self) -> Predicted {
        if self.vulnerable >= self.safe && self.vulnerable >= self.unparseable {
            Predicted::Vulnerable
        } else if self.safe >= self.unparseable {
            Predicted::Safe
        } else {
            Predicted::Unparseable
        }
    }
}

pub fn majority_vote(labels: &[Predicted]) -> Result<Predicted> {
    if labels.is_empty() {
        return Err(Error::NoVotes);
    }
    Ok(VoteTally::of(labels).winner())
}

/// Final verdict for one item from several sampled generations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Predicted,
    /// Explanation of the first sample that agrees with the vote.
    pub explanation: String,
    pub samples: Vec<String>,
    pub tally: VoteTally,
}

impl Prediction {
    pub fn from_samples(samples: Vec<String>) -> Result<Self> {
        let labels: Vec<Predicted> = samples.iter().map(|s| parse_label(s)).collect();
        let label = majority_vote(&labels)?;
        let explanation = samples
            .iter()
            .zip(&labels)
            .find(|(_, &l)| l == label)
            .map(|(s, _)| parse_explanation(s))
            .unwrap_or_default();
        Ok(Self {
            label,
            explanation,
            tally: VoteTally::of(&labels),
            samples,
        })
    }
}

/// Vulnerable is the positive class. Unparseable predictions count as wrong:
/// a false negative on a vulnerable item, a false positive on a safe one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: Predicted, gold: Label) {
        match (gold, predicted) {
            (Label::Vulnerable, Predicted::Vulnerable) => self.tp += 1,
            (Label::Vulnerable, _) => self.fn_ += 1,
            (Label::Safe, Predicted::Safe) => self.tn += 1,
            (Label::Safe, _) => self.fp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
    /// Metrics that were set to 0 because their denominator was 0.
    pub undefined: Vec<String>,
}

impl DetectionMetrics {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |name: &str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio("accuracy", c.tp + c.tn, c.total());
        let precision = ratio("precision", c.tp, c.tp + c.fp);
        let recall = ratio("recall", c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            undefined.push("f1".into());
            0.0
        } else {
            f1_score(precision, recall)
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            confusion: c,
            undefined,
        }
    }
}

/// Harmonic mean of precision and recall, in whatever units they are given.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    2.0 * precision * recall / (precision + recall)
}

pub fn detection_metrics(predictions: &[Predicted], gold: &[Label]) -> Result<DetectionMetrics> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs gold labels",
            left: predictions.len(),
            right: gold.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        c.record(p, g);
    }
    Ok(DetectionMetrics::from_counts(c))
}
