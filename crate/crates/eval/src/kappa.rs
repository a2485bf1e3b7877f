use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Consistency {
    Strong,
    Medium,
    Weak,
}

impl Consistency {
    pub fn of(kappa: f64) -> Self {
        if kappa >= 0.75 {
            Consistency::Strong
        } else if kappa >= 0.4 {
            Consistency::Medium
        } else {
            Consistency::Weak
        }
    }
}

/// `counts[i][j]` = items rater A put in category `i` and rater B in `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub categories: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn from_ratings(a: &[u32], b: &[u32], categories: &[u32]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                what: "rater A vs rater B",
                left: a.len(),
                right: b.len(),
            });
        }
        let k = categories.len();
        let index = |s: u32, item: usize| {
            categories.iter().position(|&c| c == s).ok_or_else(|| Error::Score {
                item: item.to_string(),
                score: s,
                allowed: format!("{categories:?}"),
            })
        };
        let mut counts = vec![vec![0u64; k]; k];
        for (item, (&x, &y)) in a.iter().zip(b).enumerate() {
            counts[index(x, item)?][index(y, item)?] += 1;
        }
        Ok(Self {
            categories: categories.to_vec(),
            counts,
        })
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn kappa(&self) -> Result<KappaResult> {
        let k = self.categories.len();
        if self.counts.len() != k || self.counts.iter().any(|r| r.len() != k) {
            return Err(Error::Input(format!("contingency table must be {k}x{k}")));
        }
        let n = self.n();
        if n == 0 {
            return Err(Error::Input("kappa needs at least one rated item".into()));
        }
        let agree: u64 = (0..k).map(|i| self.counts[i][i]).sum();
        let rows: Vec<u64> = self.counts.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        let chance: u128 = rows.iter().zip(&cols).map(|(&r, &c)| r as u128 * c as u128).sum();
        let n2 = n as u128 * n as u128;
        if chance == n2 {
            return Err(Error::UndefinedKappa);
        }
        // Integer numerator and denominator keep the single rounding at the
        // final division.
        let num = n as i128 * agree as i128 - chance as i128;
        let den = (n2 - chance) as i128;
        let kappa = num as f64 / den as f64;
        Ok(KappaResult {
            kappa,
            observed: agree as f64 / n as f64,
            expected: chance as f64 / n2 as f64,
            band: Consistency::of(kappa),
            n,
            categories: k,
            table: self.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    /// Observed agreement.
    pub observed: f64,
    /// Agreement expected from the two raters' marginals.
    pub expected: f64,
    pub band: Consistency,
    pub n: u64,
    pub categories: usize,
    pub table: ContingencyTable,
}

pub fn cohen_kappa(a: &[u32], b: &[u32], categories: &[u32]) -> Result<KappaResult> {
    ContingencyTable::from_ratings(a, b, categories)?.kappa()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hand_table() {
        let t = ContingencyTable {
            categories: vec![0, 1],
            counts: vec![vec![20, 5], vec![10, 15]],
        };
        let r = t.kappa().unwrap();
        assert_eq!(r.observed, 0.7);
        assert_eq!(r.expected, 0.5);
        assert_eq!(r.kappa, 0.4);
        assert_eq!(r.band, Consistency::Medium);
        assert_eq!(r.n, 50);
    }

    #[test]
    fn ratings_build_the_same_table() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, n) in [(1, 1, 20), (1, 2, 5), (2, 1, 10), (2, 2, 15)] {
            a.extend(std::iter::repeat_n(x, n));
            b.extend(std::iter::repeat_n(y, n));
        }
        assert_eq!(cohen_kappa(&a, &b, &[1, 2]).unwrap().kappa, 0.4);
    }

    #[test]
    fn perfect_agreement() {
        let a = [1, 2, 3, 4, 4, 2];
        let r = cohen_kappa(&a, &a, &[1, 2, 3, 4]).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.band, Consistency::Strong);
    }

    #[test]
    fn constant_identical_marginals_are_undefined() {
        assert!(matches!(
            cohen_kappa(&[3, 3, 3], &[3, 3, 3], &[1, 2, 3, 4]),
            Err(Error::UndefinedKappa)
        ));
    }

    #[test]
    fn bad_input() {
        assert!(cohen_kappa(&[1, 2], &[1], &[1, 2]).is_err());
        assert!(matches!(
            cohen_kappa(&[1, 5], &[1, 1], &[1, 2]),
            Err(Error::Score { score: 5, .. })
        ));
        assert!(cohen_kappa(&[], &[], &[1, 2]).is_err());
    }

    #[test]
    fn independent_raters_are_near_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<u32> = (0..10_000).map(|_| rng.random_range(1..=4)).collect();
        let b: Vec<u32> = (0..10_000).map(|_| rng.random_range(1..=4)).collect();
        assert!(cohen_kappa(&a, &b, &[1, 2, 3, 4]).unwrap().kappa.abs() < 0.1);
    }

    fn ratings() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
        prop::collection::vec((1u32..=4, 1u32..=4), 2..60).prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded((a, b) in ratings()) {
            let cats = [1, 2, 3, 4];
            let (Ok(x), Ok(y)) = (cohen_kappa(&a, &b, &cats), cohen_kappa(&b, &a, &cats)) else { return Ok(()) };
            prop_assert_eq!(x.kappa, y.kappa);
            prop_assert!((-1.0..=1.0).contains(&x.kappa));
            prop_assert!((0.0..=1.0).contains(&x.observed) && (0.0..=1.0).contains(&x.expected));
            prop_assert!((x.kappa - (x.observed - x.expected) / (1.0 - x.expected)).abs() < 1e-12);
        }

        #[test]
        fn category_relabeling_is_invisible((a, b) in ratings(), perm in Just([1u32, 2, 3, 4]).prop_shuffle()) {
            let cats = [1, 2, 3, 4];
            let relabel = |v: &[u32]| v.iter().map(|&s| perm[s as usize - 1]).collect::<Vec<_>>();
            let (Ok(x), Ok(y)) = (cohen_kappa(&a, &b, &cats), cohen_kappa(&relabel(&a), &relabel(&b), &cats)) else { return Ok(()) };
            prop_assert!((x.kappa - y.kappa).abs() < 1e-12);
        }
    }
}
