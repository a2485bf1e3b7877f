use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Correctness,
    Completeness,
    Conciseness,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Correctness, Dimension::Completeness, Dimension::Conciseness];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Correctness => "correctness",
            Dimension::Completeness => "completeness",
            Dimension::Conciseness => "conciseness",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One 4-point Likert rating.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub rater_id: String,
    pub dimension: Dimension,
    pub score: u32,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        if (1..=4).contains(&self.score) {
            Ok(())
        } else {
            Err(Error::Score {
                item: self.item_id.clone(),
                score: self.score,
                allowed: "1..=4".into(),
            })
        }
    }
}

fn positive(score: u32) -> bool {
    score >= 3
}

/// Which disagreement rules fired for an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// One rater scored negative (1-2) and another positive (3-4).
    pub polarity_split: bool,
    /// Two scores differ by more than one point.
    pub gap_over_one: bool,
}

impl Divergence {
    pub fn of(scores: &[u32]) -> Option<Self> {
        let lo = *scores.iter().min()?;
        let hi = *scores.iter().max()?;
        let d = Divergence {
            polarity_split: positive(hi) && !positive(lo),
            gap_over_one: hi - lo > 1,
        };
        (d.polarity_split || d.gap_over_one).then_some(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub item_id: String,
    pub dimension: Dimension,
    /// `(rater, score)` sorted by rater.
    pub scores: Vec<(String, u32)>,
    /// Mean score rounded down.
    pub final_score: u32,
    /// Set when the item needs a third rater.
    pub divergence: Option<Divergence>,
}

fn floor_mean(scores: impl Iterator<Item = u32>) -> u32 {
    let (sum, n) = scores.fold((0, 0), |(s, n), x| (s + x, n + 1));
    sum / n
}

/// Groups ratings by item and dimension, averages and floors them, and
/// flags disagreements. Output is sorted by item then dimension.
pub fn likert_aggregate(records: &[RatingRecord]) -> Result<Vec<AggregateScore>> {
    let mut groups: BTreeMap<(&str, Dimension), BTreeMap<&str, u32>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let raters = groups.entry((&r.item_id, r.dimension)).or_default();
        if raters.insert(&r.rater_id, r.score).is_some() {
            return Err(Error::Input(format!(
                "rater `{}` scored item `{}` ({}) twice",
                r.rater_id, r.item_id, r.dimension
            )));
        }
    }
    groups
        .into_iter()
        .map(|((item, dimension), raters)| {
            if raters.len() < 2 {
                return Err(Error::MissingRater {
                    item: item.to_string(),
                    dimension,
                    raters: raters.len(),
                });
            }
            let scores: Vec<u32> = raters.values().copied().collect();
            Ok(AggregateScore {
                item_id: item.to_string(),
                dimension,
                final_score: floor_mean(scores.iter().copied()),
                divergence: Divergence::of(&scores),
                scores: raters.into_iter().map(|(r, s)| (r.to_string(), s)).collect(),
            })
        })
        .collect()
}

/// Outcome of sending a divergent item to a third rater.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub item_id: String,
    pub dimension: Dimension,
    pub original: Vec<(String, u32)>,
    pub third_rater: String,
    pub third_score: u32,
    /// Floor of the mean over all three scores.
    pub final_score: u32,
}

pub fn resolve(item: &AggregateScore, third_rater: &str, third_score: u32) -> Result<Resolution> {
    RatingRecord {
        item_id: item.item_id.clone(),
        rater_id: third_rater.into(),
        dimension: item.dimension,
        score: third_score,
    }
    .validate()?;
    if item.scores.iter().any(|(r, _)| r == third_rater) {
        return Err(Error::Input(format!(
            "`{third_rater}` already rated item `{}`",
            item.item_id
        )));
    }
    Ok(Resolution {
        item_id: item.item_id.clone(),
        dimension: item.dimension,
        original: item.scores.clone(),
        third_rater: third_rater.into(),
        third_score,
        final_score: floor_mean(item.scores.iter().map(|(_, s)| *s).chain([third_score])),
    })
}

/// Count of each score 1..=4 per dimension.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub counts: BTreeMap<Dimension, [u64; 4]>,
}

impl RatingDistribution {
    pub fn total(&self, dimension: Dimension) -> u64 {
        self.counts.get(&dimension).map_or(0, |c| c.iter().sum())
    }

    /// Share of scores 3 and 4; `None` when the dimension has no ratings.
    pub fn positive_rate(&self, dimension: Dimension) -> Option<f64> {
        let c = self.counts.get(&dimension)?;
        let total = self.total(dimension);
        (total > 0).then(|| (c[2] + c[3]) as f64 / total as f64)
    }
}

pub fn rating_distribution(records: &[RatingRecord]) -> Result<RatingDistribution> {
    let mut d = RatingDistribution::default();
    for r in records {
        r.validate()?;
        d.counts.entry(r.dimension).or_default()[r.score as usize - 1] += 1;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(item: &str, rater: &str, dimension: Dimension, score: u32) -> RatingRecord {
        RatingRecord {
            item_id: item.into(),
            rater_id: rater.into(),
            dimension,
            score,
        }
    }

    fn pair(a: u32, b: u32) -> AggregateScore {
        let r = [
            rec("x", "r1", Dimension::Correctness, a),
            rec("x", "r2", Dimension::Correctness, b),
        ];
        likert_aggregate(&r).unwrap().remove(0)
    }

    #[test]
    fn floor_of_mean_and_flags() {
        let a = pair(4, 4);
        assert_eq!((a.final_score, a.divergence), (4, None));
        let a = pair(2, 3);
        assert_eq!(a.final_score, 2);
        assert_eq!(
            a.divergence,
            Some(Divergence {
                polarity_split: true,
                gap_over_one: false
            })
        );
        let a = pair(3, 4);
        assert_eq!((a.final_score, a.divergence), (3, None));
        let a = pair(1, 2);
        assert_eq!((a.final_score, a.divergence), (1, None));
        let a = pair(4, 1);
        assert_eq!(
            a.divergence,
            Some(Divergence {
                polarity_split: true,
                gap_over_one: true
            })
        );
    }

    #[test]
    fn gap_rule_implies_polarity_split_on_four_points() {
        for a in 1..=4 {
            for b in 1..=4 {
                if let Some(d) = Divergence::of(&[a, b]) {
                    assert!(d.polarity_split || !d.gap_over_one);
                }
                assert_eq!(Divergence::of(&[a, b]).is_some(), positive(a) != positive(b));
            }
        }
    }

    #[test]
    fn grouping_and_errors() {
        let r = [
            rec("b", "r1", Dimension::Completeness, 3),
            rec("a", "r2", Dimension::Correctness, 1),
            rec("a", "r1", Dimension::Correctness, 2),
            rec("b", "r2", Dimension::Completeness, 3),
        ];
        let agg = likert_aggregate(&r).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].item_id, "a");
        assert_eq!(agg[0].scores, vec![("r1".into(), 2), ("r2".into(), 1)]);

        let lone = [rec("a", "r1", Dimension::Correctness, 2)];
        assert!(matches!(
            likert_aggregate(&lone),
            Err(Error::MissingRater { raters: 1, .. })
        ));
        let dup = [
            rec("a", "r1", Dimension::Correctness, 2),
            rec("a", "r1", Dimension::Correctness, 3),
        ];
        assert!(likert_aggregate(&dup).is_err());
        assert!(likert_aggregate(&[rec("a", "r", Dimension::Correctness, 5)]).is_err());
    }

    #[test]
    fn third_rater_resolution() {
        let a = pair(2, 3);
        let r = resolve(&a, "r3", 4).unwrap();
        assert_eq!(r.final_score, 3);
        assert!(resolve(&a, "r1", 4).is_err());
        assert!(resolve(&a, "r3", 0).is_err());
    }

    #[test]
    fn distribution_positive_rate() {
        let r = [
            rec("a", "r", Dimension::Correctness, 1),
            rec("b", "r", Dimension::Correctness, 3),
            rec("c", "r", Dimension::Correctness, 4),
            rec("d", "r", Dimension::Correctness, 4),
        ];
        let d = rating_distribution(&r).unwrap();
        assert_eq!(d.counts[&Dimension::Correctness], [1, 0, 1, 2]);
        assert_eq!(d.positive_rate(Dimension::Correctness), Some(0.75));
        assert_eq!(d.positive_rate(Dimension::Conciseness), None);
    }
}
