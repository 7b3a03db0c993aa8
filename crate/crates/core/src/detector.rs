//! Threshold ensemble: a leak is flagged when any residual exceeds its
//! node threshold. The smooth variant replaces both indicators by steep
//! sigmoids so the thresholds can be trained by gradient descent.

use crate::error::{Error, Result};

/// Per-node thresholds, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Validation("threshold vector is empty".into()));
        }
        if let Some((j, t)) = theta.iter().enumerate().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Validation(format!("threshold {j} must be positive and finite, got {t}")));
        }
        Ok(ThresholdVector(theta))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    /// Sigmoid steepness.
    pub b: f64,
    /// Replaces the ensemble's firing threshold of 1.
    pub t: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { b: 100.0, t: 0.8 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::Config("smoothing b must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Config("smoothing T must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Logistic sigmoid `1 / (1 + exp(-x))`, branch-stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(x) * (1 - sigmoid(x))` without cancellation.
pub fn sigmoid_slope(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

fn check_dims(r: &[f64], theta: &[f64]) -> Result<()> {
    if r.len() != theta.len() {
        return Err(Error::Dimension {
            expected: theta.len(),
            got: r.len(),
        });
    }
    Ok(())
}

/// 1 iff some residual strictly exceeds its threshold.
pub fn classify_exact(r: &[f64], theta: &ThresholdVector) -> Result<bool> {
    check_dims(r, theta.as_slice())?;
    Ok(fires(r, theta.as_slice()))
}

pub(crate) fn fires(r: &[f64], theta: &[f64]) -> bool {
    r.iter().zip(theta).any(|(r, t)| r > t)
}

/// `sigmoid_b(sum_j sigmoid_b(r_j - theta_j) - T)`.
pub fn classify_smooth(r: &[f64], theta: &ThresholdVector, cfg: &SmoothingConfig) -> Result<f64> {
    check_dims(r, theta.as_slice())?;
    Ok(smooth_score(r, theta.as_slice(), cfg).0)
}

/// Gradient of [`classify_smooth`] with respect to the thresholds.
pub fn smooth_gradient(r: &[f64], theta: &ThresholdVector, cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    check_dims(r, theta.as_slice())?;
    let mut grad = vec![0.0; r.len()];
    smooth_score_grad(r, theta.as_slice(), cfg, &mut grad);
    Ok(grad)
}

/// Score and outer slope `f(1 - f)`; no dimension check. `theta` may hold
/// non-positive values during line searches.
pub(crate) fn smooth_score(r: &[f64], theta: &[f64], cfg: &SmoothingConfig) -> (f64, f64) {
    let inner: f64 = r
        .iter()
        .zip(theta)
        .map(|(r, t)| sigmoid(cfg.b * (r - t)))
        .sum();
    let z = cfg.b * (inner - cfg.t);
    (sigmoid(z), sigmoid_slope(z))
}

/// Writes `d f / d theta_j` into `grad` and returns the score.
pub(crate) fn smooth_score_grad(r: &[f64], theta: &[f64], cfg: &SmoothingConfig, grad: &mut [f64]) -> f64 {
    let (score, outer) = smooth_score(r, theta, cfg);
    let b2 = cfg.b * cfg.b;
    for ((g, r), t) in grad.iter_mut().zip(r).zip(theta) {
        *g = -b2 * outer * sigmoid_slope(cfg.b * (r - t));
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tv(v: &[f64]) -> ThresholdVector {
        ThresholdVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_vector_rejects_nonpositive() {
        assert!(ThresholdVector::new(vec![0.1, 0.0]).is_err());
        assert!(ThresholdVector::new(vec![-1.0]).is_err());
        assert!(ThresholdVector::new(vec![]).is_err());
    }

    #[test]
    fn exact_examples() {
        let theta = tv(&[0.4, 0.2, 0.3]);
        assert!(!classify_exact(&[0.0, 0.0, 0.0], &theta).unwrap());
        assert!(classify_exact(&[0.5, 0.1, 0.2], &theta).unwrap());
        assert!(!classify_exact(&[0.4, 0.2, 0.3], &theta).unwrap());
        assert!(classify_exact(&[0.5, 0.1], &theta).is_err());
    }

    #[test]
    fn smooth_examples() {
        let cfg = SmoothingConfig::default();
        let theta = tv(&[0.4, 0.2, 0.3]);
        // Inner sum 1.5, outer sigmoid_100(0.7) = 1 - 4e-31.
        let at_boundary = classify_smooth(&[0.4, 0.2, 0.3], &theta, &cfg).unwrap();
        assert!((at_boundary - 1.0).abs() < 1e-12);
        let far_below = classify_smooth(&[0.0, 0.0, 0.0], &tv(&[0.5, 0.6, 0.7]), &cfg).unwrap();
        assert!(far_below < 1e-12);
        for b in [0.1, 1.0, 100.0, 1e4] {
            assert_eq!(sigmoid(b * 0.0), 0.5);
        }
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_eq!(sigmoid(1e4), 1.0);
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let g = smooth_gradient(&[0.0; 3], &tv(&[0.5, 0.6, 0.7]), &SmoothingConfig::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
    }

    #[test]
    fn symmetric_inputs_give_identical_gradient() {
        let cfg = SmoothingConfig { b: 10.0, t: 0.8 };
        let g = smooth_gradient(&[0.3; 3], &tv(&[0.25; 3]), &cfg).unwrap();
        assert!(g[0] != 0.0 && g[0] == g[1] && g[1] == g[2]);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            r in proptest::collection::vec(0.0f64..1.0, 3),
            theta in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let cfg = SmoothingConfig { b: 10.0, t: 0.8 };
            let g = smooth_gradient(&r, &tv(&theta), &cfg).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (smooth_score(&r, &up, &cfg).0 - smooth_score(&r, &down, &cfg).0) / (2.0 * h);
                let scale = g[j].abs().max(fd.abs());
                prop_assert!((g[j] - fd).abs() <= 1e-4 * scale + 1e-9, "j={} g={} fd={}", j, g[j], fd);
            }
        }

        #[test]
        fn smooth_agrees_with_exact_away_from_boundary(
            r in proptest::collection::vec(0.0f64..2.0, 3),
            theta in proptest::collection::vec(0.01f64..2.0, 3),
        ) {
            prop_assume!(r.iter().zip(&theta).all(|(r, t)| (r - t).abs() >= 0.1));
            let cfg = SmoothingConfig::default();
            let theta = tv(&theta);
            let hard = classify_exact(&r, &theta).unwrap();
            let soft = classify_smooth(&r, &theta, &cfg).unwrap();
            prop_assert_eq!(soft > 0.5, hard);
        }

        #[test]
        fn smooth_is_nonincreasing_in_thresholds(
            r in proptest::collection::vec(0.0f64..1.0, 3),
            theta in proptest::collection::vec(0.01f64..1.0, 3),
            j in 0usize..3,
            bump in 0.0f64..0.5,
        ) {
            let cfg = SmoothingConfig { b: 10.0, t: 0.8 };
            let mut raised = theta.clone();
            raised[j] += bump;
            let before = classify_smooth(&r, &tv(&theta), &cfg).unwrap();
            let after = classify_smooth(&r, &tv(&raised), &cfg).unwrap();
            prop_assert!(after <= before);
        }
    }
}
