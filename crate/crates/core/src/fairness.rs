//! Group fairness over `K` binary sensitive features.
//!
//! `groups[k][i]` is `s_k(t_i)`. All probabilities are empirical frequencies.
//! When every sample with `s_k = 1` also has `y = 1` and each positive sample
//! belongs to exactly one group, positive rates and true positive rates
//! coincide, so `EO = (1 - DI) * max_k` and `DI = 1 - EO / max_k`.

use crate::error::{Error, Result};

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

fn conditional_rates(preds: &[bool], groups: &[Vec<bool>], labels: Option<&[bool]>) -> Result<Vec<f64>> {
    if groups.is_empty() {
        return Err(Error::Precondition("no sensitive features".into()));
    }
    if let Some(y) = labels {
        check_len(preds.len(), y.len())?;
    }
    groups
        .iter()
        .enumerate()
        .map(|(k, s)| {
            check_len(preds.len(), s.len())?;
            let mut members = 0usize;
            let mut positive = 0usize;
            for (i, (&p, &in_group)) in preds.iter().zip(s).enumerate() {
                if in_group && labels.is_none_or(|y| y[i]) {
                    members += 1;
                    positive += usize::from(p);
                }
            }
            if members == 0 {
                return Err(Error::EmptyGroup {
                    group: k + 1,
                    context: if labels.is_some() { " with y = 1" } else { "" },
                });
            }
            Ok(positive as f64 / members as f64)
        })
        .collect()
}

/// `P(Y_hat = 1 | S_k = 1)` per group.
pub fn positive_rates(preds: &[bool], groups: &[Vec<bool>]) -> Result<Vec<f64>> {
    conditional_rates(preds, groups, None)
}

/// `P(Y_hat = 1 | S_k = 1, Y = 1)` per group.
pub fn true_positive_rates(preds: &[bool], groups: &[Vec<bool>], labels: &[bool]) -> Result<Vec<f64>> {
    conditional_rates(preds, groups, Some(labels))
}

fn extremes(rates: &[f64]) -> (f64, f64) {
    rates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(*r), hi.max(*r)))
}

/// Smallest ratio of positive rates over all ordered group pairs. Defined as
/// 1 when no group receives any positive prediction.
pub fn disparate_impact(preds: &[bool], groups: &[Vec<bool>]) -> Result<(f64, Vec<f64>)> {
    let rates = positive_rates(preds, groups)?;
    Ok((di_from_rates(&rates), rates))
}

pub fn di_from_rates(rates: &[f64]) -> f64 {
    let (lo, hi) = extremes(rates);
    if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

/// Largest pairwise gap in true positive rates.
pub fn equal_opportunity(preds: &[bool], groups: &[Vec<bool>], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    let tprs = true_positive_rates(preds, groups, labels)?;
    let (lo, hi) = extremes(&tprs);
    Ok((hi - lo, tprs))
}

/// `n^-1 sum_i (s_i - mean(s)) * y_hat_i` for hard or smooth predictions.
pub fn empirical_covariance(scores: &[f64], s: &[bool]) -> Result<f64> {
    check_len(scores.len(), s.len())?;
    if s.is_empty() {
        return Err(Error::Precondition("covariance of empty samples".into()));
    }
    let n = s.len() as f64;
    let mean = s.iter().filter(|v| **v).count() as f64 / n;
    Ok(scores
        .iter()
        .zip(s)
        .map(|(y, &si)| (f64::from(u8::from(si)) - mean) * y)
        .sum::<f64>()
        / n)
}

fn check_max_k(max_k: f64) -> Result<()> {
    if !(max_k > 0.0 && max_k <= 1.0) {
        return Err(Error::Precondition(format!(
            "conversion needs max_k in (0, 1], got {max_k}"
        )));
    }
    Ok(())
}

/// Equal opportunity implied by a disparate impact score: `(1 - DI) * max_k`.
pub fn eo_from_di(di: f64, max_k: f64) -> Result<f64> {
    check_max_k(max_k)?;
    Ok((1.0 - di) * max_k)
}

/// Disparate impact implied by an equal opportunity score: `1 - EO / max_k`.
pub fn di_from_eo(eo: f64, max_k: f64) -> Result<f64> {
    check_max_k(max_k)?;
    Ok(1.0 - eo / max_k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub positive_rates: Vec<f64>,
    pub true_positive_rates: Vec<f64>,
    pub max_k: f64,
    pub min_k: f64,
    pub di: f64,
    pub eo: f64,
    /// `1 - EO / max_k`; equals `DI` (1) when `max_k = 0`.
    pub tilde_di: f64,
    /// `(1 - DI) * max_k`.
    pub tilde_eo: f64,
}

impl FairnessReport {
    pub fn evaluate(preds: &[bool], labels: &[bool], groups: &[Vec<bool>]) -> Result<Self> {
        let (di, positive_rates) = disparate_impact(preds, groups)?;
        let (eo, true_positive_rates) = equal_opportunity(preds, groups, labels)?;
        let (min_k, max_k) = extremes(&positive_rates);
        let (tilde_di, tilde_eo) = if max_k > 0.0 {
            (di_from_eo(eo, max_k)?, eo_from_di(di, max_k)?)
        } else {
            (di, 0.0)
        };
        Ok(FairnessReport {
            positive_rates,
            true_positive_rates,
            max_k,
            min_k,
            di,
            eo,
            tilde_di,
            tilde_eo,
        })
    }

    /// Disparate impact holds with tolerance `epsilon`.
    pub fn di_holds(&self, epsilon: f64) -> bool {
        self.di >= 1.0 - epsilon
    }

    /// Equal opportunity holds with tolerance `epsilon`.
    pub fn eo_holds(&self, epsilon: f64) -> bool {
        self.eo <= epsilon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn groups_of(members: &[Option<usize>], k: usize) -> Vec<Vec<bool>> {
        (0..k).map(|g| members.iter().map(|m| *m == Some(g)).collect()).collect()
    }

    #[test]
    fn di_counting_example() {
        let preds = [true, false, true, true, true, true, false, false];
        let members: Vec<_> = (0..8).map(|i| Some(i / 4)).collect();
        let (di, rates) = disparate_impact(&preds, &groups_of(&members, 2)).unwrap();
        assert_eq!(rates, vec![0.75, 0.5]);
        assert!((di - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn di_all_positive_and_all_negative() {
        let members: Vec<_> = (0..6).map(|i| Some(i % 3)).collect();
        let g = groups_of(&members, 3);
        assert_eq!(disparate_impact(&[true; 6], &g).unwrap().0, 1.0);
        assert_eq!(disparate_impact(&[false; 6], &g).unwrap().0, 1.0);
    }

    #[test]
    fn di_from_published_rates() {
        for third in [0.4880, 0.6, 0.8468] {
            let di = di_from_rates(&[0.8468, 0.4880, third]);
            assert!((di - 0.5763).abs() < 5e-5, "{di}");
        }
    }

    #[test]
    fn empty_group_is_named() {
        let g = vec![vec![true, false], vec![false, false]];
        match disparate_impact(&[true, false], &g) {
            Err(Error::EmptyGroup { group, .. }) => assert_eq!(group, 2),
            other => panic!("{other:?}"),
        }
        let y = [false, false];
        assert!(matches!(
            equal_opportunity(&[true, false], &g, &y),
            Err(Error::EmptyGroup { group: 1, .. })
        ));
    }

    #[test]
    fn eo_examples() {
        // TPRs 1.0 and 0.25.
        let preds = [true, true, true, false, false, false];
        let y = [true, true, true, true, true, true];
        let members = [Some(0), Some(0), Some(1), Some(1), Some(1), Some(1)];
        let (eo, tprs) = equal_opportunity(&preds, &groups_of(&members, 2), &y).unwrap();
        assert_eq!(tprs, vec![1.0, 0.25]);
        assert_eq!(eo, 0.75);
        let (eo, _) = equal_opportunity(&[true, false, true, false], &groups_of(&[Some(0), Some(0), Some(1), Some(1)], 2), &[true; 4]).unwrap();
        assert_eq!(eo, 0.0);
    }

    #[test]
    fn published_eo_row() {
        assert!((0.9983f64 - 0.6372 - 0.3611).abs() < 5e-5);
        assert!((eo_from_di(0.6383, 0.9983).unwrap() - 0.3611).abs() < 5e-5);
    }

    #[test]
    fn covariance_examples() {
        let s = [true, false, true, false];
        assert_eq!(empirical_covariance(&[1.0, 0.0, 0.0, 0.0], &s).unwrap(), 0.125);
        assert_eq!(empirical_covariance(&[1.0, 0.0, 1.0, 0.0], &s).unwrap(), 0.25);
        assert_eq!(empirical_covariance(&[1.0; 4], &s).unwrap(), 0.0);
        assert_eq!(empirical_covariance(&[0.0; 4], &s).unwrap(), 0.0);
        assert!(empirical_covariance(&[1.0; 3], &s).is_err());
    }

    #[test]
    fn conversions() {
        assert!((eo_from_di(0.5763, 0.8468).unwrap() - 0.3588).abs() < 5e-5);
        assert!((di_from_eo(0.3598, 1.0).unwrap() - 0.6402).abs() < 5e-5);
        assert_eq!(eo_from_di(1.0, 0.37).unwrap(), 0.0);
        assert!(eo_from_di(0.5, 0.0).is_err());
        assert!(di_from_eo(0.5, 0.0).is_err());
    }

    fn structured() -> impl Strategy<Value = (Vec<bool>, Vec<Option<usize>>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(proptest::option::of(0usize..3), n),
            )
        })
    }

    proptest! {
        #[test]
        fn corollary_holds_on_structured_labels((preds, members) in structured()) {
            let groups = groups_of(&members, 3);
            prop_assume!(groups.iter().all(|g| g.iter().any(|v| *v)));
            let labels: Vec<bool> = members.iter().map(Option::is_some).collect();
            let rep = FairnessReport::evaluate(&preds, &labels, &groups).unwrap();
            prop_assert_eq!(&rep.positive_rates, &rep.true_positive_rates);
            prop_assert!((rep.eo - (1.0 - rep.di) * rep.max_k).abs() <= 1e-12);
            prop_assert!((rep.di - rep.tilde_di).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&rep.di) && (0.0..=1.0).contains(&rep.eo));
            prop_assert!(rep.min_k <= rep.max_k);
            if rep.max_k > 0.0 {
                prop_assert_eq!(rep.di == 1.0, rep.eo == 0.0);
            }
        }

        #[test]
        fn metrics_are_permutation_invariant((preds, members) in structured(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let groups = groups_of(&members, 3);
            prop_assume!(groups.iter().all(|g| g.iter().any(|v| *v)));
            let labels: Vec<bool> = members.iter().map(Option::is_some).collect();
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<bool> = order.iter().map(|&i| preds[i]).collect();
            let m2: Vec<Option<usize>> = order.iter().map(|&i| members[i]).collect();
            let y2: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
            let a = FairnessReport::evaluate(&preds, &labels, &groups).unwrap();
            let b = FairnessReport::evaluate(&p2, &y2, &groups_of(&m2, 3)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
