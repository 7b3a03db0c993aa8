//! Leak-free virtual sensors and pressure residuals.
//!
//! Each virtual sensor is a linear regression predicting one sensor's
//! pressure from the rolling means of all other sensors. Residuals are the
//! absolute prediction errors.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::csvfmt;
use crate::error::{Error, Result};
use crate::hydrosim::PressureDataset;
use crate::network::NodeId;

const RIDGE_PENALTY: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    /// Rolling-mean window is `window + 1` samples.
    pub window: usize,
    /// Fall back to a tiny ridge penalty when the Gram matrix is singular.
    pub ridge_fallback: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: 2,
            ridge_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSensor {
    pub node_id: NodeId,
    /// Column of the target in the sensor ordering.
    pub target: usize,
    pub intercept: f64,
    /// One weight per other sensor, in sensor order with `target` skipped.
    pub weights: Vec<f64>,
}

impl VirtualSensor {
    /// Prediction for the target from a row of rolling means over all sensors.
    pub fn predict(&self, means: &[f64]) -> f64 {
        self.intercept
            + means
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != self.target)
                .zip(&self.weights)
                .map(|((_, m), w)| m * w)
                .sum::<f64>()
    }
}

/// Residual rows with labels and group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    /// Number of residual columns `d_c`.
    pub dim: usize,
    pub group_count: usize,
    /// Row-major `[rows][dim]`.
    pub residuals: Vec<f64>,
    pub labels: Vec<bool>,
    pub leak_group: Vec<Option<usize>>,
    pub times: Vec<f64>,
    pub scenario_ids: Vec<usize>,
}

impl ResidualDataset {
    pub fn empty(dim: usize, group_count: usize) -> Self {
        ResidualDataset {
            dim,
            group_count,
            residuals: Vec::new(),
            labels: Vec::new(),
            leak_group: Vec::new(),
            times: Vec::new(),
            scenario_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.residuals[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.residuals.chunks_exact(self.dim)
    }

    /// Column `k` of the sensitive-feature matrix.
    pub fn group_column(&self, k: usize) -> Vec<bool> {
        self.leak_group.iter().map(|g| *g == Some(k)).collect()
    }

    pub fn group_columns(&self) -> Vec<Vec<bool>> {
        (0..self.group_count).map(|k| self.group_column(k)).collect()
    }

    pub fn append(&mut self, other: &ResidualDataset) -> Result<()> {
        if other.dim != self.dim || other.group_count != self.group_count {
            return Err(Error::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.residuals.extend_from_slice(&other.residuals);
        self.labels.extend_from_slice(&other.labels);
        self.leak_group.extend_from_slice(&other.leak_group);
        self.times.extend_from_slice(&other.times);
        self.scenario_ids.extend_from_slice(&other.scenario_ids);
        Ok(())
    }

    /// Concatenation of several datasets in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ResidualDataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Precondition("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for p in iter {
            out.append(p)?;
        }
        Ok(out)
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|y| **y).count()
    }
}

/// Trailing rolling mean over `window + 1` rows. Row `i` of the output
/// corresponds to input row `i + window`; the first `window` rows have no
/// complete history and are dropped.
pub fn rolling_mean(series: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    if series.len() < window + 1 {
        return Err(Error::Precondition(format!(
            "rolling mean over {} rows needs at least {} rows",
            series.len(),
            window + 1
        )));
    }
    let cols = series[0].len();
    let scale = 1.0 / (window + 1) as f64;
    Ok((window..series.len())
        .map(|i| {
            (0..cols)
                .map(|c| series[i - window..=i].iter().map(|r| r[c]).sum::<f64>() * scale)
                .collect()
        })
        .collect())
}

/// Fits one virtual sensor per sensor column on leak-free scenarios.
pub fn fit_virtual_sensors(
    leak_free: &[PressureDataset],
    cfg: &PreprocessConfig,
) -> Result<Vec<VirtualSensor>> {
    let first = leak_free
        .first()
        .ok_or_else(|| Error::Precondition("no leak-free data".into()))?;
    let d = first.sensor_ids.len();
    if d < 2 {
        return Err(Error::Precondition("virtual sensors need at least two sensors".into()));
    }
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for ds in leak_free {
        if ds.sensor_ids != first.sensor_ids {
            return Err(Error::Dimension {
                expected: d,
                got: ds.sensor_ids.len(),
            });
        }
        if let Some(i) = ds.labels.iter().position(|y| *y) {
            return Err(Error::Precondition(format!(
                "training data must be leak-free; scenario {} has a leak at step {i}",
                ds.scenario_id
            )));
        }
        means.extend(rolling_mean(&ds.pressures, cfg.window)?);
        targets.extend(ds.pressures[cfg.window..].iter().cloned());
    }

    (0..d)
        .map(|j| {
            let x: Vec<Vec<f64>> = means
                .iter()
                .map(|row| row.iter().enumerate().filter(|(c, _)| *c != j).map(|(_, v)| *v).collect())
                .collect();
            let y: Vec<f64> = targets.iter().map(|row| row[j]).collect();
            let (intercept, weights) = least_squares(&x, &y, cfg.ridge_fallback)?;
            Ok(VirtualSensor {
                node_id: first.sensor_ids[j],
                target: j,
                intercept,
                weights,
            })
        })
        .collect()
}

/// Ordinary least squares with intercept via centered normal equations.
fn least_squares(x: &[Vec<f64>], y: &[f64], ridge_fallback: bool) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Precondition("empty regression design".into()));
    }
    let p = x[0].len();
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..p).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (row, &t) in x.iter().zip(y) {
        for a in 0..p {
            let xa = row[a] - x_mean[a];
            rhs[a] += xa * (t - y_mean) / nf;
            for b in 0..p {
                gram[(a, b)] += xa * (row[b] - x_mean[b]) / nf;
            }
        }
    }

    let scale = (0..p).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max);
    let well_posed = scale > 0.0
        && gram
            .clone()
            .cholesky()
            .map(|c| {
                let l = c.l();
                (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min) > 1e-12 * scale
            })
            .unwrap_or(false);
    let weights = if well_posed {
        gram.cholesky().expect("checked above").solve(&rhs)
    } else if ridge_fallback {
        let ridged = &gram + DMatrix::<f64>::identity(p, p) * RIDGE_PENALTY;
        ridged
            .cholesky()
            .ok_or_else(|| Error::Singular("ridge-regularized Gram matrix".into()))?
            .solve(&rhs)
    } else {
        return Err(Error::Singular("rank-deficient regression design".into()));
    };
    let weights: Vec<f64> = weights.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok((intercept, weights))
}

/// Residuals `|p_j - f_j(mean_{!=j})|` for every step with full history.
pub fn compute_residuals(
    vs: &[VirtualSensor],
    data: &PressureDataset,
    cfg: &PreprocessConfig,
) -> Result<ResidualDataset> {
    let d = data.sensor_ids.len();
    if vs.len() != d {
        return Err(Error::Dimension {
            expected: vs.len(),
            got: d,
        });
    }
    for (j, s) in vs.iter().enumerate() {
        if s.target != j || s.weights.len() + 1 != d || s.node_id != data.sensor_ids[j] {
            return Err(Error::Validation(format!(
                "virtual sensor {j} does not match the dataset's sensor ordering"
            )));
        }
    }
    let means = rolling_mean(&data.pressures, cfg.window)?;
    let mut out = ResidualDataset::empty(d, data.group_count);
    for (k, m) in means.iter().enumerate() {
        let i = k + cfg.window;
        for (j, s) in vs.iter().enumerate() {
            out.residuals.push((data.pressures[i][j] - s.predict(m)).abs());
        }
        out.labels.push(data.labels[i]);
        out.leak_group.push(data.leak_group[i]);
        out.times.push(data.times[i]);
        out.scenario_ids.push(data.scenario_id);
    }
    Ok(out)
}

/// `node_id,intercept,w_1,...,w_{d-1}` with 17 significant digits.
pub fn write_sensors_csv(vs: &[VirtualSensor]) -> String {
    let p = vs.first().map_or(0, |s| s.weights.len());
    let mut out = String::from("node_id,intercept");
    for i in 1..=p {
        let _ = write!(out, ",w_{i}");
    }
    out.push('\n');
    for s in vs {
        let _ = write!(out, "{},{}", s.node_id, csvfmt::exact(s.intercept));
        for w in &s.weights {
            let _ = write!(out, ",{}", csvfmt::exact(*w));
        }
        out.push('\n');
    }
    out
}

pub fn read_sensors_csv(text: &str) -> Result<Vec<VirtualSensor>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty sensors file"))?;
    let cols = csvfmt::fields(header);
    if cols.len() < 3 || cols[0] != "node_id" || cols[1] != "intercept" {
        return Err(Error::parse(1, "expected `node_id,intercept,w_1,...`"));
    }
    lines
        .enumerate()
        .map(|(target, (idx, line))| {
            let f = csvfmt::fields(line);
            if f.len() != cols.len() {
                return Err(Error::parse(idx + 1, "wrong number of fields"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::parse(idx + 1, format!("invalid number `{s}`")))
            };
            Ok(VirtualSensor {
                node_id: f[0].parse().map_err(|_| Error::parse(idx + 1, "invalid node id"))?,
                target,
                intercept: num(f[1])?,
                weights: f[2..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(pressures: Vec<Vec<f64>>) -> PressureDataset {
        let n = pressures.len();
        let d = pressures[0].len();
        PressureDataset {
            scenario_id: 0,
            spec: None,
            sensor_ids: (1..=d as u32).collect(),
            group_count: 1,
            times: (0..n).map(|i| i as f64 * 600.0).collect(),
            pressures,
            labels: vec![false; n],
            leak_group: vec![None; n],
        }
    }

    fn sse(vs: &VirtualSensor, ds: &PressureDataset, window: usize) -> f64 {
        let m = rolling_mean(&ds.pressures, window).unwrap();
        m.iter()
            .enumerate()
            .map(|(k, row)| (ds.pressures[k + window][vs.target] - vs.predict(row)).powi(2))
            .sum()
    }

    #[test]
    fn rolling_mean_examples() {
        let x = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        assert_eq!(rolling_mean(&x, 0).unwrap(), x);
        assert_eq!(rolling_mean(&x, 2).unwrap(), vec![vec![2.0, 5.0]]);
        assert!(rolling_mean(&x, 3).is_err());
    }

    #[test]
    fn exact_linear_relation_recovered() {
        // p2(t) = 2 * mean(p1) over the window, so the fit is exact.
        let p1: Vec<f64> = (0..60).map(|i| 50.0 + (i as f64 * 0.7).sin()).collect();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let m = if i >= 2 { (p1[i] + p1[i - 1] + p1[i - 2]) / 3.0 } else { 0.0 };
                vec![p1[i], 2.0 * m]
            })
            .collect();
        let ds = dataset(rows);
        let vs = fit_virtual_sensors(std::slice::from_ref(&ds), &PreprocessConfig::default()).unwrap();
        assert!((vs[1].weights[0] - 2.0).abs() < 1e-8, "{:?}", vs[1]);
        assert!(vs[1].intercept.abs() < 1e-6, "{:?}", vs[1]);
        let r = compute_residuals(&vs, &ds, &PreprocessConfig::default()).unwrap();
        for row in r.rows() {
            assert!(row[1] < 1e-8);
        }
    }

    #[test]
    fn constant_target_gets_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), 7.5])
            .collect();
        let vs = fit_virtual_sensors(&[dataset(rows)], &PreprocessConfig::default()).unwrap();
        assert!(vs[2].weights.iter().all(|w| w.abs() < 1e-10));
        assert!((vs[2].intercept - 7.5).abs() < 1e-10);
    }

    #[test]
    fn constant_inputs_need_ridge() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![3.0, i as f64]).collect();
        let strict = PreprocessConfig {
            window: 2,
            ridge_fallback: false,
        };
        assert!(matches!(
            fit_virtual_sensors(&[dataset(rows.clone())], &strict),
            Err(Error::Singular(_))
        ));
        let vs = fit_virtual_sensors(&[dataset(rows)], &PreprocessConfig::default()).unwrap();
        assert_eq!(vs[1].weights[0], 0.0);
    }

    #[test]
    fn leaky_training_data_rejected() {
        let mut ds = dataset(vec![vec![1.0, 2.0]; 10]);
        ds.labels[4] = true;
        ds.leak_group[4] = Some(0);
        assert!(matches!(
            fit_virtual_sensors(&[ds], &PreprocessConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fit_beats_intercept_only_and_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.random_range(40.0..60.0);
                let b: f64 = rng.random_range(30.0..50.0);
                vec![a, b, 0.3 * a + 0.5 * b + rng.random_range(-1.0..1.0)]
            })
            .collect();
        let ds = dataset(rows);
        let cfg = PreprocessConfig::default();
        let vs = fit_virtual_sensors(std::slice::from_ref(&ds), &cfg).unwrap();
        for s in &vs {
            let fitted = sse(s, &ds, cfg.window);
            // Oracle: best constant predictor is the target mean.
            let targets: Vec<f64> = ds.pressures[2..].iter().map(|r| r[s.target]).collect();
            let mean = targets.iter().sum::<f64>() / targets.len() as f64;
            let baseline: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
            assert!(fitted <= baseline + 1e-9);
            for w in 0..s.weights.len() {
                for delta in [-1e-3, 1e-3] {
                    let mut moved = s.clone();
                    moved.weights[w] += delta;
                    assert!(sse(&moved, &ds, cfg.window) >= fitted);
                }
            }
        }
    }

    #[test]
    fn residual_is_absolute_difference() {
        let vs = vec![
            VirtualSensor {
                node_id: 1,
                target: 0,
                intercept: 5.0,
                weights: vec![0.0],
            },
            VirtualSensor {
                node_id: 2,
                target: 1,
                intercept: 0.0,
                weights: vec![0.0],
            },
        ];
        let ds = dataset(vec![vec![4.2, 0.0]]);
        let r = compute_residuals(&vs, &ds, &PreprocessConfig { window: 0, ridge_fallback: true }).unwrap();
        assert!((r.row(0)[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn residuals_reject_dimension_mismatch() {
        let ds = dataset(vec![vec![1.0, 2.0, 3.0]; 5]);
        let vs = fit_virtual_sensors(&[dataset(vec![vec![1.0, 2.0]; 5])], &PreprocessConfig::default()).unwrap();
        assert!(compute_residuals(&vs, &ds, &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn sensors_csv_round_trips() {
        let vs = vec![VirtualSensor {
            node_id: 3,
            target: 0,
            intercept: 1.0 / 3.0,
            weights: vec![std::f64::consts::PI, -1e-17],
        }];
        let text = write_sensors_csv(&vs);
        assert!(text.starts_with("node_id,intercept,w_1,w_2\n"));
        assert_eq!(read_sensors_csv(&text).unwrap(), vs);
    }

    proptest! {
        #[test]
        fn rolling_mean_is_linear(
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            x in proptest::collection::vec(-100.0f64..100.0, 12),
            y in proptest::collection::vec(-100.0f64..100.0, 12),
            window in 0usize..4,
        ) {
            let xs: Vec<Vec<f64>> = x.chunks(2).map(<[f64]>::to_vec).collect();
            let ys: Vec<Vec<f64>> = y.chunks(2).map(<[f64]>::to_vec).collect();
            let combo: Vec<Vec<f64>> = xs.iter().zip(&ys)
                .map(|(r, s)| r.iter().zip(s).map(|(u, v)| a * u + b * v).collect())
                .collect();
            let lhs = rolling_mean(&combo, window).unwrap();
            let rx = rolling_mean(&xs, window).unwrap();
            let ry = rolling_mean(&ys, window).unwrap();
            for (i, row) in lhs.iter().enumerate() {
                for c in 0..2 {
                    let rhs = a * rx[i][c] + b * ry[i][c];
                    prop_assert!((row[c] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
                }
            }
        }

        #[test]
        fn residuals_are_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(0.0..50.0)).collect()).collect();
            let ds = dataset(rows);
            let vs = fit_virtual_sensors(std::slice::from_ref(&ds), &PreprocessConfig::default()).unwrap();
            let r = compute_residuals(&vs, &ds, &PreprocessConfig::default()).unwrap();
            prop_assert!(r.residuals.iter().all(|v| *v >= 0.0));
            prop_assert_eq!(r.len(), 18);
        }
    }
}
