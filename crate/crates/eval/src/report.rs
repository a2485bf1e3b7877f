//! File formats and the combined evaluation report.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{DetectionMetrics, Predicted, Prediction};
use crate::kappa::{cohen_kappa, KappaResult};
use crate::likert::{
    likert_aggregate, rating_distribution, AggregateScore, Dimension, RatingDistribution, RatingRecord,
};
use crate::{Error, Label, Result};

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold_label: Label,
    pub samples: Vec<String>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.samples.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("item `{}` has no samples", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `item_id,rater_id,dimension,score` rows.
pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: RatingRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub metrics: DetectionMetrics,
    /// Ids whose voted label differs from the gold label.
    pub misclassified: Vec<String>,
    pub predictions: Vec<ItemVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub id: String,
    pub gold_label: Label,
    pub prediction: Prediction,
}

pub fn score_predictions(records: &[PredictionRecord]) -> Result<DetectionReport> {
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        predictions.push(ItemVerdict {
            id: r.id.clone(),
            gold_label: r.gold_label,
            prediction: Prediction::from_samples(r.samples.clone())?,
        });
    }
    let labels: Vec<Predicted> = predictions.iter().map(|p| p.prediction.label).collect();
    let gold: Vec<Label> = predictions.iter().map(|p| p.gold_label).collect();
    let metrics = crate::detection_metrics(&labels, &gold)?;
    let misclassified = predictions
        .iter()
        .filter(|p| p.prediction.label != Predicted::from(p.gold_label))
        .map(|p| p.id.clone())
        .collect();
    Ok(DetectionReport {
        metrics,
        misclassified,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub rater_a: String,
    pub rater_b: String,
    pub dimension: Dimension,
    /// `None` when kappa is undefined for this pair.
    pub result: Option<KappaResult>,
}

/// Kappa for every pair of raters on every dimension, over the items both
/// rated.
pub fn pairwise_kappa(records: &[RatingRecord]) -> Vec<PairKappa> {
    let mut by: BTreeMap<(Dimension, &str), BTreeMap<&str, u32>> = BTreeMap::new();
    for r in records {
        by.entry((r.dimension, &r.rater_id))
            .or_default()
            .insert(&r.item_id, r.score);
    }
    let mut out = Vec::new();
    for dim in Dimension::ALL {
        let raters: Vec<&str> = by.keys().filter(|(d, _)| *d == dim).map(|(_, r)| *r).collect();
        for (i, a) in raters.iter().enumerate() {
            for b in &raters[i + 1..] {
                let (ra, rb) = (&by[&(dim, *a)], &by[&(dim, *b)]);
                let (x, y): (Vec<u32>, Vec<u32>) =
                    ra.iter().filter_map(|(item, &s)| rb.get(item).map(|&t| (s, t))).unzip();
                if x.is_empty() {
                    continue;
                }
                out.push(PairKappa {
                    rater_a: a.to_string(),
                    rater_b: b.to_string(),
                    dimension: dim,
                    result: cohen_kappa(&x, &y, &[1, 2, 3, 4]).ok(),
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingReport {
    pub distribution: RatingDistribution,
    pub positive_rates: BTreeMap<Dimension, f64>,
    pub kappa: Vec<PairKappa>,
    pub aggregates: Vec<AggregateScore>,
    /// Items whose raters diverge and need a third rating.
    pub resolution_queue: Vec<AggregateScore>,
}

pub fn rating_report(records: &[RatingRecord]) -> Result<RatingReport> {
    let distribution = rating_distribution(records)?;
    let positive_rates = Dimension::ALL
        .iter()
        .filter_map(|&d| distribution.positive_rate(d).map(|r| (d, r)))
        .collect();
    let aggregates = likert_aggregate(records)?;
    let resolution_queue = aggregates.iter().filter(|a| a.divergence.is_some()).cloned().collect();
    Ok(RatingReport {
        distribution,
        positive_rates,
        kappa: pairwise_kappa(records),
        aggregates,
        resolution_queue,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Option<DetectionReport>,
    pub ratings: Option<RatingReport>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_collects_misclassified_ids() {
        let records = vec![
            PredictionRecord {
                id: "a".into(),
                gold_label: Label::Vulnerable,
                samples: vec!["LABEL: Vulnerable".into(), "LABEL: Safe".into()],
            },
            PredictionRecord {
                id: "b".into(),
                gold_label: Label::Safe,
                samples: vec!["LABEL: Vulnerable".into(), "garbled".into(), "garbled".into()],
            },
        ];
        let r = score_predictions(&records).unwrap();
        assert_eq!(r.metrics.confusion.tp, 1);
        assert_eq!(r.metrics.confusion.fp, 1);
        assert_eq!(r.misclassified, vec!["b"]);
        assert_eq!(r.predictions[1].prediction.label, Predicted::Unparseable);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let recs = vec![PredictionRecord {
            id: "x".into(),
            gold_label: Label::Safe,
            samples: vec!["LABEL: Safe".into()],
        }];
        write_predictions(&p, &recs).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), recs);
        std::fs::write(&p, "{\"id\":\"x\",\"gold_label\":\"Safe\",\"samples\":[]}\n").unwrap();
        assert!(matches!(read_predictions(&p), Err(Error::Parse { line: 1, .. })));

        let r = dir.path().join("r.csv");
        std::fs::write(
            &r,
            "item_id,rater_id,dimension,score\ni1,alice,correctness,3\ni1,bob,correctness,4\n",
        )
        .unwrap();
        let ratings = read_ratings(&r).unwrap();
        assert_eq!(ratings[1].rater_id, "bob");
        write_ratings(&r, &ratings).unwrap();
        assert_eq!(read_ratings(&r).unwrap(), ratings);
        std::fs::write(&r, "item_id,rater_id,dimension,score\ni1,alice,correctness,7\n").unwrap();
        assert!(read_ratings(&r).is_err());
    }

    #[test]
    fn rating_report_pairs_and_queue() {
        let mut recs = Vec::new();
        for (item, a, b) in [("1", 4, 4), ("2", 2, 3), ("3", 1, 1), ("4", 3, 4)] {
            for (rater, s) in [("alice", a), ("bob", b)] {
                recs.push(RatingRecord {
                    item_id: item.into(),
                    rater_id: rater.into(),
                    dimension: Dimension::Correctness,
                    score: s,
                });
            }
        }
        let r = rating_report(&recs).unwrap();
        assert_eq!(r.kappa.len(), 1);
        assert!(r.kappa[0].result.is_some());
        assert_eq!(r.resolution_queue.len(), 1);
        assert_eq!(r.resolution_queue[0].item_id, "2");
        assert_eq!(r.positive_rates[&Dimension::Correctness], 5.0 / 8.0);
    }
}
