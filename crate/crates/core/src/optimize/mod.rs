//! Threshold training: the H grid search, smoothed-loss minimization with
//! optional covariance constraints, and accuracy-constrained DI maximization.

mod losses;
mod solvers;

use std::fmt::{self, Write as _};
use std::str::FromStr;

pub use losses::{
    accuracy, covariance_bound, covariance_constraints, loss_l1, loss_l2, predict, Prediction, RowFunctional,
};
pub use solvers::{
    barrier_objective, barrier_value, bfgs_minimize, nelder_mead_minimize, NelderMeadOptions, OptimOptions,
    OptimResult,
};

use crate::detector::{fires, SmoothingConfig, ThresholdVector};
use crate::error::{Error, Result};
use crate::fairness;
use crate::sensors::ResidualDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    H,
    TFpr,
    Acc,
    TFprF,
    AccF,
    DiAcc,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::H,
        MethodKind::TFpr,
        MethodKind::Acc,
        MethodKind::TFprF,
        MethodKind::AccF,
        MethodKind::DiAcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::H => "H",
            MethodKind::TFpr => "T-F-PR",
            MethodKind::Acc => "ACC",
            MethodKind::TFprF => "T-F-PR+F",
            MethodKind::AccF => "ACC+F",
            MethodKind::DiAcc => "DI+ACC",
        }
    }

    /// Methods with a fairness hyperparameter.
    pub fn is_fair(self) -> bool {
        matches!(self, MethodKind::TFprF | MethodKind::AccF | MethodKind::DiAcc)
    }

    /// The unconstrained method a fairness method is compared against.
    pub fn baseline_partner(self) -> Option<MethodKind> {
        match self {
            MethodKind::TFprF => Some(MethodKind::TFpr),
            MethodKind::AccF | MethodKind::DiAcc => Some(MethodKind::Acc),
            _ => None,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// `c` for covariance methods, `lambda` for DI+ACC, ignored otherwise.
    pub hyper: f64,
    pub smoothing: SmoothingConfig,
    /// Barrier weights, strictly decreasing.
    pub barrier: Vec<f64>,
    pub budget: OptimOptions,
}

impl MethodSpec {
    pub fn new(kind: MethodKind, hyper: f64) -> Self {
        MethodSpec {
            kind,
            hyper,
            smoothing: SmoothingConfig::default(),
            barrier: vec![1.0, 0.1, 0.01],
            budget: OptimOptions {
                max_iterations: 200,
                tolerance: 1e-6,
            },
        }
    }

    pub fn with_hyper(&self, hyper: f64) -> Self {
        MethodSpec { hyper, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        match self.kind {
            MethodKind::TFprF | MethodKind::AccF if !(self.hyper >= 0.0 && self.hyper.is_finite()) => {
                return Err(Error::Config(format!("{}: c must be nonnegative, got {}", self.kind, self.hyper)));
            }
            MethodKind::DiAcc if !(0.0..=1.0).contains(&self.hyper) => {
                return Err(Error::Config(format!("DI+ACC: lambda must lie in [0, 1], got {}", self.hyper)));
            }
            _ => {}
        }
        if self.barrier.is_empty() || self.barrier.iter().any(|m| !(*m > 0.0)) || self.barrier.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("barrier schedule must be positive and strictly decreasing".into()));
        }
        if self.budget.max_iterations == 0 || !(self.budget.tolerance > 0.0) {
            return Err(Error::Config("optimizer budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub method: MethodSpec,
    pub theta: ThresholdVector,
    pub iterations: usize,
    pub final_objective: f64,
    /// Exact-prediction constraint values at `theta`; negative entries are
    /// violations. Empty for unconstrained methods.
    pub slacks: Vec<f64>,
}

impl TrainedModel {
    pub fn min_slack(&self) -> Option<f64> {
        self.slacks.iter().copied().reduce(f64::min)
    }
}

fn check_data(theta0: &[f64], data: &ResidualDataset) -> Result<()> {
    if theta0.len() != data.dim {
        return Err(Error::Dimension {
            expected: data.dim,
            got: theta0.len(),
        });
    }
    let pos = data.positives();
    if pos == 0 || pos == data.len() {
        return Err(Error::Precondition("training data needs both classes".into()));
    }
    for k in 0..data.group_count {
        if !data.leak_group.contains(&Some(k)) {
            return Err(Error::EmptyGroup {
                group: k + 1,
                context: " in training data",
            });
        }
    }
    Ok(())
}

/// Trains `spec` on `data` starting from `theta0`. DI+ACC first trains the
/// ACC method from `theta0` for its reference accuracy.
pub fn train(spec: &MethodSpec, data: &ResidualDataset, theta0: &[f64]) -> Result<TrainedModel> {
    spec.validate()?;
    check_data(theta0, data)?;
    match spec.kind {
        MethodKind::H => train_h(spec, data, theta0),
        MethodKind::TFpr | MethodKind::Acc => train_smooth(spec, data, theta0, None),
        MethodKind::TFprF | MethodKind::AccF => train_smooth(spec, data, theta0, Some(spec.hyper)),
        MethodKind::DiAcc => {
            let acc = train(&MethodSpec { kind: MethodKind::Acc, ..spec.clone() }, data, theta0)?;
            let reference = accuracy(acc.theta.as_slice(), data);
            train_di_acc(spec, data, acc.theta.as_slice(), reference)
        }
    }
}

const H_GRID_POINTS: usize = 25;
const H_SWEEPS: usize = 2;
const MIN_THRESHOLD: f64 = 1e-12;

/// Percentiles from the median to the 99.9th, denser towards the tail.
fn h_percentiles() -> Vec<f64> {
    (0..H_GRID_POINTS)
        .map(|i| 100.0 - 50.0 * 0.002f64.powf(i as f64 / (H_GRID_POINTS - 1) as f64))
        .collect()
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn train_h(spec: &MethodSpec, data: &ResidualDataset, theta0: &[f64]) -> Result<TrainedModel> {
    let dim = data.dim;
    let negatives: Vec<usize> = (0..data.len()).filter(|i| !data.labels[*i]).collect();
    let grids: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            let mut col: Vec<f64> = negatives.iter().map(|&i| data.row(i)[j]).collect();
            col.sort_by(f64::total_cmp);
            let mut grid: Vec<f64> = h_percentiles()
                .into_iter()
                .map(|q| percentile(&col, q).max(MIN_THRESHOLD))
                .collect();
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            grid
        })
        .collect();

    let mut theta: Vec<f64> = grids.iter().map(|g| *g.last().unwrap()).collect();
    let mut evaluations = 0;
    for _ in 0..H_SWEEPS {
        for j in 0..dim {
            // Rows already flagged by the other nodes.
            let others: Vec<bool> = data
                .rows()
                .map(|r| r.iter().zip(&theta).enumerate().any(|(m, (r, t))| m != j && r > t))
                .collect();
            let mut best = (usize::MAX, theta[j]);
            for &cand in &grids[j] {
                let correct = data
                    .rows()
                    .zip(&data.labels)
                    .zip(&others)
                    .filter(|((r, y), o)| (**o || r[j] > cand) == **y)
                    .count();
                evaluations += 1;
                if best.0 == usize::MAX || correct > best.0 {
                    best = (correct, cand);
                }
            }
            theta[j] = best.1;
        }
    }
    let mut acc = accuracy(&theta, data);
    if theta0.iter().all(|t| *t > 0.0) {
        let acc0 = accuracy(theta0, data);
        if acc0 > acc {
            theta = theta0.to_vec();
            acc = acc0;
        }
    }
    Ok(TrainedModel {
        method: spec.clone(),
        theta: ThresholdVector::new(theta)?,
        iterations: evaluations,
        final_objective: -acc,
        slacks: Vec::new(),
    })
}

fn loss_functional(kind: MethodKind, data: &ResidualDataset) -> Result<RowFunctional> {
    match kind {
        MethodKind::TFpr | MethodKind::TFprF => RowFunctional::l1(data),
        _ => RowFunctional::l2(data),
    }
}

/// Smoothed loss plus covariance barrier with gradient. `+inf` outside the
/// positive orthant or the strict feasible region.
struct SmoothObjective<'a> {
    data: &'a ResidualDataset,
    cfg: SmoothingConfig,
    loss: RowFunctional,
    covariances: Vec<RowFunctional>,
    c: f64,
}

impl SmoothObjective<'_> {
    fn constraints(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.covariances.len());
        for cov in &self.covariances {
            let v = cov.evaluate(theta, self.data, Prediction::Smooth(self.cfg));
            out.push(self.c - v);
            out.push(self.c + v);
        }
        out
    }

    fn value_grad(&self, theta: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        if theta.iter().any(|t| !(*t > 0.0)) {
            return f64::INFINITY;
        }
        let mut value = self.loss.evaluate_grad(theta, self.data, &self.cfg, grad);
        let mut g = vec![0.0; theta.len()];
        for cov in &self.covariances {
            let v = cov.evaluate_grad(theta, self.data, &self.cfg, &mut g);
            let (lo, hi) = (self.c - v, self.c + v);
            if !(lo > 0.0 && hi > 0.0) {
                return f64::INFINITY;
            }
            value -= mu * (lo.ln() + hi.ln());
            for (gi, dv) in grad.iter_mut().zip(&g) {
                *gi -= mu * (-dv / lo + dv / hi);
            }
        }
        value
    }
}

fn exact_covariance_slacks(theta: &[f64], data: &ResidualDataset, c: f64) -> Result<Vec<f64>> {
    covariance_constraints(theta, data, c, Prediction::Exact)
}

fn train_smooth(spec: &MethodSpec, data: &ResidualDataset, theta0: &[f64], c: Option<f64>) -> Result<TrainedModel> {
    let loss = loss_functional(spec.kind, data)?;
    // A bound at or above every attainable |Cov| can never bind.
    let c = c.filter(|&c| (0..data.group_count).any(|k| c < covariance_bound(data, k)));
    let covariances = match c {
        Some(_) => (0..data.group_count)
            .map(|k| RowFunctional::covariance(data, k))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let objective = SmoothObjective {
        data,
        cfg: spec.smoothing,
        loss,
        covariances,
        c: c.unwrap_or(0.0),
    };

    let mut theta = theta0.to_vec();
    let mut iterations = 0;
    let schedule: Vec<f64> = if c.is_some() { spec.barrier.clone() } else { vec![0.0] };
    if c.is_some() {
        let (restored, evals) = restore_covariance_feasibility(&objective, &theta, spec)?;
        theta = restored;
        iterations += evals;
    } else if theta.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Precondition("initial thresholds must be positive".into()));
    }

    let mut value = f64::NAN;
    for mu in schedule {
        let res = bfgs_minimize(|x, g| objective.value_grad(x, mu, g), &theta, &spec.budget)?;
        iterations += res.iterations;
        theta = res.x;
        value = res.value;
    }

    let slacks = match c {
        Some(c) => exact_covariance_slacks(&theta, data, c)?,
        None => match spec.kind {
            MethodKind::TFprF | MethodKind::AccF => exact_covariance_slacks(&theta, data, spec.hyper)?,
            _ => Vec::new(),
        },
    };
    if let Some(worst) = slacks.iter().copied().reduce(f64::min).filter(|w| *w < -1e-6) {
        log::warn!(
            "{} with c = {}: exact predictions violate a covariance constraint by {:.3e}",
            spec.kind,
            spec.hyper,
            -worst
        );
    }
    Ok(TrainedModel {
        method: spec.clone(),
        theta: ThresholdVector::new(theta)?,
        iterations,
        final_objective: value,
        slacks,
    })
}

const RESTORATION_STEP: f64 = 0.25;
const RESTORATION_MARGIN: f64 = 0.1;

fn restoration_options(budget: &OptimOptions) -> NelderMeadOptions {
    NelderMeadOptions {
        max_iterations: budget.max_iterations * 5,
        tolerance: 1e-9,
        relative_step: RESTORATION_STEP,
        absolute_step: RESTORATION_STEP,
    }
}

/// Finds a strictly feasible start for the covariance barrier: a simplex
/// search on the squared violations, then uniform threshold scaling, which
/// drives every smoothed prediction and hence every covariance to zero.
fn restore_covariance_feasibility(objective: &SmoothObjective<'_>, theta0: &[f64], spec: &MethodSpec) -> Result<(Vec<f64>, usize)> {
    let margin = RESTORATION_MARGIN * objective.c;
    let feasible = |t: &[f64]| t.iter().all(|v| *v > 0.0) && objective.constraints(t).iter().all(|c| *c > margin);
    if feasible(theta0) {
        return Ok((theta0.to_vec(), 0));
    }
    let penalty = |t: &[f64]| {
        if t.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        objective
            .constraints(t)
            .iter()
            .map(|c| (margin - c).max(0.0).powi(2))
            .sum::<f64>()
    };
    let mut evals = 0;
    if theta0.iter().all(|t| *t > 0.0) {
        let res = nelder_mead_minimize(penalty, theta0, &restoration_options(&spec.budget))?;
        evals += res.iterations;
        if feasible(&res.x) {
            return Ok((res.x, evals));
        }
    }
    let mut theta: Vec<f64> = theta0.iter().map(|t| t.abs().max(1e-3)).collect();
    for _ in 0..60 {
        theta.iter_mut().for_each(|t| *t *= 2.0);
        evals += 1;
        if feasible(&theta) {
            return Ok((theta, evals));
        }
    }
    Err(Error::Infeasible(format!(
        "{}: no start satisfies the covariance constraints with c = {}; increase c",
        spec.kind, objective.c
    )))
}

/// Thresholds above every residual in `data`, so the ensemble never fires.
pub fn silent_thresholds(data: &ResidualDataset) -> Vec<f64> {
    (0..data.dim)
        .map(|j| data.rows().map(|r| r[j]).fold(MIN_THRESHOLD, f64::max) * 1.5)
        .collect()
}

/// `(-DI, ACC)` of the exact ensemble.
fn exact_di_acc(theta: &[f64], data: &ResidualDataset, groups: &[Vec<usize>]) -> (f64, f64) {
    let preds: Vec<bool> = data.rows().map(|r| fires(r, theta)).collect();
    let rates: Vec<f64> = groups
        .iter()
        .map(|rows| rows.iter().filter(|&&i| preds[i]).count() as f64 / rows.len() as f64)
        .collect();
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    (-fairness::di_from_rates(&rates), correct as f64 / data.len() as f64)
}

/// DI+ACC with a known reference accuracy: maximize exact DI subject to
/// `ACC >= (1 - lambda) * reference` through the barrier schedule.
pub fn train_di_acc(spec: &MethodSpec, data: &ResidualDataset, theta0: &[f64], reference: f64) -> Result<TrainedModel> {
    spec.validate()?;
    check_data(theta0, data)?;
    let lambda = spec.hyper;
    let floor = (1.0 - lambda) * reference;
    let groups: Vec<Vec<usize>> = (0..data.group_count)
        .map(|k| (0..data.len()).filter(|&i| data.leak_group[i] == Some(k)).collect())
        .collect();
    let objective = |theta: &[f64], mu: f64| {
        if theta.iter().any(|t| !(*t > 0.0)) {
            return f64::INFINITY;
        }
        let (neg_di, acc) = exact_di_acc(theta, data, &groups);
        barrier_value(neg_di, &[acc - floor], mu)
    };
    let nm = NelderMeadOptions {
        max_iterations: spec.budget.max_iterations,
        tolerance: 1e-9,
        relative_step: RESTORATION_STEP,
        absolute_step: RESTORATION_STEP,
    };
    let mu0 = spec.barrier[0];

    // Candidate starts: the given point and the silent ensemble that never
    // fires, which is perfectly fair whenever its accuracy is admissible.
    let silent = silent_thresholds(data);
    let mut starts = Vec::new();
    let mut iterations = 0;
    if objective(theta0, mu0).is_finite() {
        starts.push(theta0.to_vec());
    } else if theta0.iter().all(|t| *t > 0.0) {
        let penalty = |t: &[f64]| {
            if t.iter().any(|v| !(*v > 0.0)) {
                return f64::INFINITY;
            }
            let (_, acc) = exact_di_acc(t, data, &groups);
            (floor + 1e-9 - acc).max(0.0)
        };
        let res = nelder_mead_minimize(penalty, theta0, &restoration_options(&spec.budget))?;
        iterations += res.iterations;
        if objective(&res.x, mu0).is_finite() {
            starts.push(res.x);
        }
    }
    if objective(&silent, mu0).is_finite() {
        starts.push(silent);
    }
    if starts.is_empty() {
        return Err(Error::Infeasible(format!(
            "DI+ACC: no thresholds reach accuracy {floor:.4} (lambda = {lambda}); increase lambda"
        )));
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let mut theta = start;
        let mut value = f64::NAN;
        for &mu in &spec.barrier {
            let res = nelder_mead_minimize(|t| objective(t, mu), &theta, &nm)?;
            iterations += res.iterations;
            theta = res.x;
            value = res.value;
        }
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((theta, value));
        }
    }
    let (theta, value) = best.expect("at least one start");
    let (_, acc) = exact_di_acc(&theta, data, &groups);
    Ok(TrainedModel {
        method: spec.clone(),
        theta: ThresholdVector::new(theta)?,
        iterations,
        final_objective: value,
        slacks: vec![acc - floor],
    })
}

/// One line of the models CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub method: MethodKind,
    /// Leak diameter in meters.
    pub d: f64,
    pub hyper: f64,
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub final_objective: f64,
}

impl ModelRow {
    pub fn new(d: f64, model: &TrainedModel) -> Self {
        ModelRow {
            method: model.method.kind,
            d,
            hyper: model.method.hyper,
            theta: model.theta.as_slice().to_vec(),
            iterations: model.iterations,
            final_objective: model.final_objective,
        }
    }
}

pub fn write_models_csv(rows: &[ModelRow]) -> Result<String> {
    let dim = rows.first().map_or(0, |r| r.theta.len());
    let mut out = String::from("method,d,c_or_lambda");
    for j in 1..=dim {
        write!(out, ",theta_{j}").unwrap();
    }
    out.push_str(",iterations,final_objective\n");
    for r in rows {
        if r.theta.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: r.theta.len(),
            });
        }
        write!(out, "{},{},{}", r.method, r.d, r.hyper).unwrap();
        for t in &r.theta {
            write!(out, ",{t}").unwrap();
        }
        writeln!(out, ",{},{}", r.iterations, r.final_objective).unwrap();
    }
    Ok(out)
}

pub fn read_models_csv(text: &str) -> Result<Vec<ModelRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let cols = crate::csvfmt::fields(header);
    if cols.len() < 6 || cols[..3] != ["method", "d", "c_or_lambda"] {
        return Err(Error::parse(1, "unexpected models header"));
    }
    let dim = cols.len() - 5;
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|e| Error::parse(line, format!("{s:?}: {e}")));
    let mut rows = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f = crate::csvfmt::fields(line);
        if f.len() != cols.len() {
            return Err(Error::parse(ln, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        rows.push(ModelRow {
            method: f[0].parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?,
            d: num(ln, f[1])?,
            hyper: num(ln, f[2])?,
            theta: f[3..3 + dim].iter().map(|s| num(ln, s)).collect::<Result<_>>()?,
            iterations: f[3 + dim]
                .parse()
                .map_err(|e| Error::parse(ln, format!("iterations: {e}")))?,
            final_objective: num(ln, f[4 + dim])?,
        });
    }
    Ok(rows)
}
