//! Training losses and covariance constraints over a residual dataset.
//!
//! Every quantity here is affine in the per-row predictions, so each is
//! represented by row weights plus an offset and evaluated with exact or
//! smoothed predictions.

use crate::detector::{fires, smooth_score_grad, SmoothingConfig};
use crate::error::{Error, Result};
use crate::sensors::ResidualDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Exact,
    Smooth(SmoothingConfig),
}

/// `offset + sum_i weights[i] * y_hat_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowFunctional {
    weights: Vec<f64>,
    offset: f64,
}

impl RowFunctional {
    /// `L1 = -TPR + FPR`.
    pub fn l1(data: &ResidualDataset) -> Result<Self> {
        let pos = data.positives();
        let neg = data.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Precondition("L1 needs both positive and negative labels".into()));
        }
        let weights = data
            .labels
            .iter()
            .map(|&y| if y { -1.0 / pos as f64 } else { 1.0 / neg as f64 })
            .collect();
        Ok(RowFunctional { weights, offset: 0.0 })
    }

    /// `L2 = -ACC`.
    pub fn l2(data: &ResidualDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Precondition("L2 needs at least one row".into()));
        }
        let n = data.len() as f64;
        let neg = (data.len() - data.positives()) as f64;
        let weights = data.labels.iter().map(|&y| if y { -1.0 / n } else { 1.0 / n }).collect();
        Ok(RowFunctional { weights, offset: -neg / n })
    }

    /// Empirical covariance between `s_k` and the prediction.
    pub fn covariance(data: &ResidualDataset, k: usize) -> Result<Self> {
        if k >= data.group_count {
            return Err(Error::Dimension {
                expected: data.group_count,
                got: k + 1,
            });
        }
        if data.is_empty() {
            return Err(Error::Precondition("covariance of empty samples".into()));
        }
        let n = data.len() as f64;
        let mean = data.leak_group.iter().filter(|g| **g == Some(k)).count() as f64 / n;
        let weights = data
            .leak_group
            .iter()
            .map(|g| (f64::from(u8::from(*g == Some(k))) - mean) / n)
            .collect();
        Ok(RowFunctional { weights, offset: 0.0 })
    }

    pub fn evaluate(&self, theta: &[f64], data: &ResidualDataset, pred: Prediction) -> f64 {
        match pred {
            Prediction::Exact => {
                self.offset
                    + data
                        .rows()
                        .zip(&self.weights)
                        .filter(|(r, _)| fires(r, theta))
                        .map(|(_, w)| w)
                        .sum::<f64>()
            }
            Prediction::Smooth(cfg) => {
                let mut scratch = vec![0.0; theta.len()];
                self.offset
                    + data
                        .rows()
                        .zip(&self.weights)
                        .map(|(r, w)| w * smooth_score_grad(r, theta, &cfg, &mut scratch))
                        .sum::<f64>()
            }
        }
    }

    /// Smoothed value with its gradient in `grad`.
    pub fn evaluate_grad(&self, theta: &[f64], data: &ResidualDataset, cfg: &SmoothingConfig, grad: &mut [f64]) -> f64 {
        let mut row_grad = vec![0.0; theta.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = self.offset;
        for (r, w) in data.rows().zip(&self.weights) {
            value += w * smooth_score_grad(r, theta, cfg, &mut row_grad);
            for (g, rg) in grad.iter_mut().zip(&row_grad) {
                *g += w * rg;
            }
        }
        value
    }
}

fn check_theta(theta: &[f64], data: &ResidualDataset) -> Result<()> {
    if theta.len() != data.dim {
        return Err(Error::Dimension {
            expected: data.dim,
            got: theta.len(),
        });
    }
    Ok(())
}

/// `-TPR + FPR`.
pub fn loss_l1(theta: &[f64], data: &ResidualDataset, pred: Prediction) -> Result<f64> {
    check_theta(theta, data)?;
    Ok(RowFunctional::l1(data)?.evaluate(theta, data, pred))
}

/// `-ACC`.
pub fn loss_l2(theta: &[f64], data: &ResidualDataset, pred: Prediction) -> Result<f64> {
    check_theta(theta, data)?;
    Ok(RowFunctional::l2(data)?.evaluate(theta, data, pred))
}

/// `[c - Cov_1, c + Cov_1, ..., c - Cov_K, c + Cov_K]`.
pub fn covariance_constraints(theta: &[f64], data: &ResidualDataset, c: f64, pred: Prediction) -> Result<Vec<f64>> {
    check_theta(theta, data)?;
    let mut out = Vec::with_capacity(2 * data.group_count);
    for k in 0..data.group_count {
        let cov = RowFunctional::covariance(data, k)?.evaluate(theta, data, pred);
        out.push(c - cov);
        out.push(c + cov);
    }
    Ok(out)
}

/// Largest possible `|Cov(s_k, y_hat)|` over predictions in `[0, 1]`.
pub fn covariance_bound(data: &ResidualDataset, k: usize) -> f64 {
    let p = data.leak_group.iter().filter(|g| **g == Some(k)).count() as f64 / data.len().max(1) as f64;
    p * (1.0 - p)
}

/// Exact accuracy of the ensemble.
pub fn accuracy(theta: &[f64], data: &ResidualDataset) -> f64 {
    let correct = data
        .rows()
        .zip(&data.labels)
        .filter(|(r, y)| fires(r, theta) == **y)
        .count();
    correct as f64 / data.len().max(1) as f64
}

/// Exact ensemble predictions.
pub fn predict(theta: &[f64], data: &ResidualDataset) -> Vec<bool> {
    data.rows().map(|r| fires(r, theta)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fairness;
    use proptest::prelude::*;

    /// Dataset from explicit residual rows, labels and leak groups.
    pub(crate) fn dataset(rows: &[Vec<f64>], groups: &[Option<usize>], group_count: usize) -> ResidualDataset {
        let dim = rows[0].len();
        ResidualDataset {
            dim,
            group_count,
            residuals: rows.concat(),
            labels: groups.iter().map(Option::is_some).collect(),
            leak_group: groups.to_vec(),
            times: (0..rows.len()).map(|i| i as f64).collect(),
            scenario_ids: vec![0; rows.len()],
        }
    }

    fn two_by_two() -> ResidualDataset {
        // Positives at rows 0..4, negatives at 4..8. With theta = 1 the
        // ensemble fires on rows 0, 1, 2 and 4.
        let rows: Vec<Vec<f64>> = [2.0, 2.0, 2.0, 0.5, 2.0, 0.5, 0.5, 0.5].iter().map(|v| vec![*v]).collect();
        let groups = [Some(0), Some(0), Some(1), Some(1), None, None, None, None];
        dataset(&rows, &groups, 2)
    }

    #[test]
    fn l1_examples() {
        let d = two_by_two();
        assert_eq!(loss_l1(&[1.0], &d, Prediction::Exact).unwrap(), -0.5);
        assert_eq!(loss_l1(&[0.1], &d, Prediction::Exact).unwrap(), 0.0);
        let separable = dataset(&[vec![2.0], vec![0.1]], &[Some(0), None], 1);
        assert_eq!(loss_l1(&[1.0], &separable, Prediction::Exact).unwrap(), -1.0);
        let single = dataset(&[vec![2.0]], &[Some(0)], 1);
        assert!(loss_l1(&[1.0], &single, Prediction::Exact).is_err());
    }

    #[test]
    fn l2_examples() {
        let d = two_by_two();
        assert_eq!(loss_l2(&[1.0], &d, Prediction::Exact).unwrap(), -0.75);
        assert_eq!(loss_l2(&[0.1], &d, Prediction::Exact).unwrap(), -0.5);
        let separable = dataset(&[vec![2.0], vec![0.1]], &[Some(0), None], 1);
        assert_eq!(loss_l2(&[1.0], &separable, Prediction::Exact).unwrap(), -1.0);
        assert_eq!(accuracy(&[1.0], &d), 0.75);
    }

    #[test]
    fn constraint_examples() {
        let d = two_by_two();
        // Constant predictor: zero covariance.
        assert_eq!(covariance_constraints(&[0.1], &d, 0.3, Prediction::Exact).unwrap(), vec![0.3; 4]);
        // Group 0 rows 0, 1 both fire: cov = (2 * 0.75 - 2 * 0.25) / 8 = 0.125.
        let c = covariance_constraints(&[1.0], &d, 0.1, Prediction::Exact).unwrap();
        assert!((c[0] + 0.025).abs() < 1e-15 && (c[1] - 0.225).abs() < 1e-15, "{c:?}");
        let c = covariance_constraints(&[1.0], &d, 0.5, Prediction::Exact).unwrap();
        assert!(c.iter().all(|v| *v >= 0.25));
        assert!(covariance_constraints(&[1.0, 1.0], &d, 0.5, Prediction::Exact).is_err());
    }

    fn random_dataset() -> impl Strategy<Value = ResidualDataset> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), n),
                proptest::collection::vec(proptest::option::of(0usize..3), n),
            )
                .prop_map(|(rows, groups)| dataset(&rows, &groups, 3))
        })
    }

    proptest! {
        #[test]
        fn exact_covariance_matches_fairness_metric(
            data in random_dataset(),
            theta in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let preds: Vec<f64> = predict(&theta, &data).iter().map(|p| f64::from(u8::from(*p))).collect();
            let c = covariance_constraints(&theta, &data, 0.0, Prediction::Exact).unwrap();
            for k in 0..3 {
                let cov = fairness::empirical_covariance(&preds, &data.group_column(k)).unwrap();
                prop_assert!((c[2 * k + 1] - cov).abs() <= 1e-12);
            }
        }

        #[test]
        fn smooth_gradients_match_central_differences(
            data in random_dataset(),
            theta in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            prop_assume!(data.positives() > 0 && data.positives() < data.len());
            let cfg = SmoothingConfig { b: 10.0, t: 0.8 };
            let mut functionals = vec![RowFunctional::l1(&data).unwrap(), RowFunctional::l2(&data).unwrap()];
            functionals.extend((0..3).map(|k| RowFunctional::covariance(&data, k).unwrap()));
            for f in &functionals {
                let mut g = vec![0.0; 3];
                f.evaluate_grad(&theta, &data, &cfg, &mut g);
                let h = 1e-6;
                for j in 0..3 {
                    let mut up = theta.clone();
                    let mut down = theta.clone();
                    up[j] += h;
                    down[j] -= h;
                    let fd = (f.evaluate(&up, &data, Prediction::Smooth(cfg)) - f.evaluate(&down, &data, Prediction::Smooth(cfg))) / (2.0 * h);
                    let scale = g[j].abs().max(fd.abs());
                    prop_assert!((g[j] - fd).abs() <= 1e-4 * scale + 1e-9, "j={} g={} fd={}", j, g[j], fd);
                }
            }
        }

        #[test]
        fn covariance_within_bound(data in random_dataset(), theta in proptest::collection::vec(0.0f64..1.0, 3)) {
            let cfg = SmoothingConfig { b: 10.0, t: 0.8 };
            for k in 0..3 {
                let cov = RowFunctional::covariance(&data, k).unwrap().evaluate(&theta, &data, Prediction::Smooth(cfg));
                prop_assert!(cov.abs() <= covariance_bound(&data, k) + 1e-12);
            }
        }
    }
}
