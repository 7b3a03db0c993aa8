//! End-to-end pipelines behind the CLI subcommands.
//!
//! Every output is a pure function of the configuration and master seed:
//! scenarios own their random streams, parallel results are collected in
//! key order, and floats are written in shortest round-trip form.

mod config;
mod svg;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{ExperimentConfig, ScenarioPlan, SweepPlan};

use crate::error::{Error, Result};
use crate::fairness::{self, FairnessReport};
use crate::hydrosim::{
    simulate_with_model, stream_seed, write_dataset_csv, HydraulicModel, LeakSpec, PressureDataset, ScenarioSpec,
};
use crate::network::{assign_groups, GroupAssignment, GroupConfig, Network, SensorSet};
use crate::optimize::{self, train, train_di_acc, MethodKind, ModelRow, TrainedModel};
use crate::sensors::{compute_residuals, fit_virtual_sensors, write_sensors_csv, ResidualDataset, VirtualSensor};

const SPLIT_SALT: u64 = 0x5EED_0F_5B117;

/// Network, sensors and groups loaded from a configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub network: Network,
    pub sensors: SensorSet,
    pub groups: GroupAssignment,
}

impl Workspace {
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        let network = Network::read_inp(&config.network)?;
        let group_cfg = GroupConfig::read(&config.groups)?;
        let groups = assign_groups(&network, &group_cfg)?;
        let sensors = SensorSet::new(&network, group_cfg.sensors.clone())?;
        Ok(Workspace {
            config,
            network,
            sensors,
            groups,
        })
    }

    /// Leak-free scenarios first, then one scenario per diameter and node.
    pub fn scenario_specs(&self) -> Result<Vec<ScenarioSpec>> {
        let plan = &self.config.scenarios;
        let nodes: Vec<_> = match &plan.nodes {
            Some(n) => n.clone(),
            None => self.network.nodes.iter().map(|n| n.id).collect(),
        };
        for n in &nodes {
            if self.network.junction(*n).is_none() {
                return Err(Error::Config(format!("leak node {n} is not a junction")));
            }
        }
        if plan.diameters.is_empty() || nodes.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        if plan.leak_free == 0 {
            return Err(Error::Config("no leak-free scenarios to fit virtual sensors".into()));
        }
        let mut specs: Vec<ScenarioSpec> = (0..plan.leak_free).map(ScenarioSpec::leak_free).collect();
        for &diameter in &plan.diameters {
            for &node in &nodes {
                specs.push(ScenarioSpec {
                    index: specs.len(),
                    leak: Some(LeakSpec {
                        node,
                        diameter,
                        start_step: plan.leak_start,
                        end_step: plan.leak_end,
                    }),
                });
            }
        }
        Ok(specs)
    }

    pub fn simulate(&self) -> Result<Vec<PressureDataset>> {
        let specs = self.scenario_specs()?;
        let model = HydraulicModel::new(&self.network);
        specs
            .par_iter()
            .map(|spec| {
                simulate_with_model(&model, &self.network, &self.sensors, &self.groups, spec, &self.config.simulation)
            })
            .collect()
    }
}

/// Train and test residuals of one leak diameter.
#[derive(Debug, Clone)]
pub struct DiameterData {
    pub diameter: f64,
    pub train: ResidualDataset,
    pub test: ResidualDataset,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub virtual_sensors: Vec<VirtualSensor>,
    pub diameters: Vec<DiameterData>,
}

/// Fits virtual sensors on the leak-free scenarios and splits each
/// diameter's leak scenarios into train and test sets.
///
/// The split is by scenario and stratified by the leak node's group, so every
/// group appears on both sides and no scenario straddles the split.
pub fn prepare(ws: &Workspace, datasets: &[PressureDataset]) -> Result<Prepared> {
    let cfg = &ws.config;
    let leak_free: Vec<PressureDataset> = datasets.iter().filter(|d| d.spec.is_some_and(|s| s.leak.is_none())).cloned().collect();
    let vs = fit_virtual_sensors(&leak_free, &cfg.preprocess)?;
    let residuals: Vec<ResidualDataset> = datasets
        .par_iter()
        .map(|d| compute_residuals(&vs, d, &cfg.preprocess))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for (di, &diameter) in cfg.scenarios.diameters.iter().enumerate() {
        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); ws.groups.group_count()];
        for (i, d) in datasets.iter().enumerate() {
            if let Some(leak) = d.spec.and_then(|s| s.leak).filter(|l| l.diameter == diameter) {
                let g = ws.groups.group_of(leak.node).expect("leak nodes are grouped");
                by_group[g].push(i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed ^ SPLIT_SALT, di));
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (g, members) in by_group.iter_mut().enumerate() {
            if members.len() < 2 {
                return Err(Error::Config(format!(
                    "diameter {diameter}: group {} needs at least two leak scenarios for a train/test split",
                    g + 1
                )));
            }
            members.shuffle(&mut rng);
            let n_train = ((cfg.train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
            train_idx.extend_from_slice(&members[..n_train]);
            test_idx.extend_from_slice(&members[n_train..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        out.push(DiameterData {
            diameter,
            train: ResidualDataset::concat(train_idx.iter().map(|&i| &residuals[i]))?,
            test: ResidualDataset::concat(test_idx.iter().map(|&i| &residuals[i]))?,
        });
    }
    Ok(Prepared {
        virtual_sensors: vs,
        diameters: out,
    })
}

/// Exact test-set metrics of a threshold vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub fairness: FairnessReport,
}

pub fn evaluate(theta: &[f64], data: &ResidualDataset) -> Result<Evaluation> {
    let preds = optimize::predict(theta, data);
    Ok(Evaluation {
        accuracy: optimize::accuracy(theta, data),
        fairness: FairnessReport::evaluate(&preds, &data.labels, &data.group_columns())?,
    })
}

/// H, T-F-PR and ACC trained on one diameter.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub diameter: f64,
    pub models: Vec<(TrainedModel, Evaluation)>,
}

impl Baselines {
    pub fn get(&self, kind: MethodKind) -> Option<&(TrainedModel, Evaluation)> {
        self.models.iter().find(|(m, _)| m.method.kind == kind)
    }
}

fn train_baselines(cfg: &ExperimentConfig, data: &DiameterData) -> Result<Baselines> {
    let start: Vec<f64> = vec![f64::MAX; data.train.dim];
    let h = train(&cfg.method_spec(MethodKind::H, 0.0), &data.train, &start)?;
    let mut models = vec![(h.clone(), evaluate(h.theta.as_slice(), &data.test)?)];
    for kind in [MethodKind::TFpr, MethodKind::Acc] {
        if cfg.methods.contains(&kind) {
            let m = train(&cfg.method_spec(kind, 0.0), &data.train, h.theta.as_slice())?;
            let e = evaluate(m.theta.as_slice(), &data.test)?;
            models.push((m, e));
        }
    }
    Ok(Baselines {
        diameter: data.diameter,
        models,
    })
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn simulate_and_prepare(ws: &Workspace) -> Result<(Vec<PressureDataset>, Prepared)> {
    let datasets = ws.simulate()?;
    let prepared = prepare(ws, &datasets)?;
    Ok((datasets, prepared))
}

/// Writes `dataset.csv` and `sensors.csv`.
pub fn run_simulate(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<Prepared> {
    let ws = Workspace::load(cfg.clone())?;
    pool(jobs)?.install(|| {
        let (datasets, prepared) = simulate_and_prepare(&ws)?;
        write_file(out, "dataset.csv", &write_dataset_csv(&datasets)?)?;
        write_file(out, "sensors.csv", &write_sensors_csv(&prepared.virtual_sensors))?;
        Ok(prepared)
    })
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub baselines: Vec<Baselines>,
}

impl BaselineReport {
    /// `(d, H-method evaluation)` per diameter.
    pub fn table1(&self) -> Vec<(f64, &Evaluation)> {
        self.baselines
            .iter()
            .map(|b| (b.diameter, &b.get(MethodKind::H).expect("H is always trained").1))
            .collect()
    }
}

pub fn table1_csv(report: &BaselineReport) -> String {
    let mut out = String::from("d,ACC,max_k,min_k,DI,EO,tilde_DI,tilde_EO\n");
    for (d, e) in report.table1() {
        let f = &e.fairness;
        writeln!(out, "{d},{},{},{},{},{},{},{}", e.accuracy, f.max_k, f.min_k, f.di, f.eo, f.tilde_di, f.tilde_eo).unwrap();
    }
    out
}

fn baseline_pipeline(ws: &Workspace) -> Result<(Prepared, BaselineReport)> {
    let (_, prepared) = simulate_and_prepare(ws)?;
    let baselines = prepared
        .diameters
        .par_iter()
        .map(|d| train_baselines(&ws.config, d))
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, BaselineReport { baselines }))
}

fn models_csv(rows: impl IntoIterator<Item = (f64, TrainedModel)>) -> Result<String> {
    let rows: Vec<ModelRow> = rows.into_iter().map(|(d, m)| ModelRow::new(d, &m)).collect();
    optimize::write_models_csv(&rows)
}

/// Writes `table1.csv` and `models.csv`.
pub fn run_baseline(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<BaselineReport> {
    let ws = Workspace::load(cfg.clone())?;
    pool(jobs)?.install(|| {
        let (_, report) = baseline_pipeline(&ws)?;
        write_file(out, "table1.csv", &table1_csv(&report))?;
        let models = report
            .baselines
            .iter()
            .flat_map(|b| b.models.iter().map(move |(m, _)| (b.diameter, m.clone())));
        write_file(out, "models.csv", &models_csv(models)?)?;
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: MethodKind,
    pub diameter: f64,
    pub hyper: f64,
    pub accuracy: f64,
    pub di: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// `(method, d, ACC, DI)` of the unconstrained baselines on the test set.
    pub baselines: Vec<(MethodKind, f64, f64, f64)>,
    pub models: Vec<(f64, TrainedModel)>,
}

impl SweepReport {
    pub fn baseline(&self, method: MethodKind, d: f64) -> Option<(f64, f64)> {
        self.baselines
            .iter()
            .find(|(m, bd, _, _)| *m == method && *bd == d)
            .map(|(_, _, acc, di)| (*acc, *di))
    }

    pub fn curve(&self, method: MethodKind, d: f64) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.method == method && p.diameter == d).collect()
    }
}

/// Hyperparameter of sweep step `i`, rounded to suppress accumulation noise.
fn sweep_value(start: f64, step: f64, i: usize) -> f64 {
    ((start + step * i as f64) * 1e9).round() / 1e9
}

fn sweep_method(
    cfg: &ExperimentConfig,
    data: &DiameterData,
    baselines: &Baselines,
    method: MethodKind,
) -> Result<Vec<(SweepPoint, TrainedModel)>> {
    let partner = method.baseline_partner().expect("fair method");
    let (partner_model, partner_eval) = baselines.get(partner).expect("partner trained");
    let theta0 = partner_model.theta.as_slice();
    let reference = optimize::accuracy(theta0, &data.train);
    let (start, step, valid): (f64, f64, fn(f64) -> bool) = match method {
        MethodKind::DiAcc => (cfg.sweep.lambda_start, cfg.sweep.lambda_step, |v| (0.0..=1.0).contains(&v)),
        _ => (cfg.sweep.c_start, cfg.sweep.c_step, |v| v >= 0.0),
    };
    let fit = |spec: &optimize::MethodSpec, start: &[f64]| match method {
        MethodKind::DiAcc => train_di_acc(spec, &data.train, start, reference),
        _ => train(spec, &data.train, start),
    };

    // The chain begins at the silent ensemble, which is perfectly fair.
    // Covariance methods start each step from both the previous solution and
    // the partner and keep the lower objective; their smoothed loss is flat
    // around the silent ensemble, so the previous solution alone would never
    // leave it. DI+ACC continues from the previous solution while that stays
    // admissible and falls back to the partner otherwise.
    let mut previous = optimize::silent_thresholds(&data.train);
    let mut out = Vec::new();
    for hyper in (0..cfg.sweep.max_steps).map(|i| sweep_value(start, step, i)).take_while(|v| valid(*v)) {
        let spec = cfg.method_spec(method, hyper);
        let mut best: Option<TrainedModel> = None;
        let mut last_err = None;
        let continued = method == MethodKind::DiAcc && optimize::accuracy(&previous, &data.train) > (1.0 - hyper) * reference;
        let starts: &[&[f64]] = if continued { &[previous.as_slice()] } else { &[previous.as_slice(), theta0] };
        for s in starts.iter().copied() {
            match fit(&spec, s) {
                Ok(m) => {
                    if best.as_ref().is_none_or(|b| m.final_objective < b.final_objective) {
                        best = Some(m);
                    }
                }
                Err(Error::Infeasible(msg)) => last_err = Some(msg),
                Err(e) => return Err(e),
            }
        }
        let Some(model) = best else {
            log::info!("{method} d={} hyper={hyper}: skipped ({})", data.diameter, last_err.unwrap_or_default());
            continue;
        };
        previous = model.theta.as_slice().to_vec();
        let e = evaluate(model.theta.as_slice(), &data.test)?;
        let point = SweepPoint {
            method,
            diameter: data.diameter,
            hyper,
            accuracy: e.accuracy,
            di: e.fairness.di,
        };
        let stop = point.di <= partner_eval.fairness.di;
        out.push((point, model));
        if stop {
            break;
        }
    }
    Ok(out)
}

fn sweep_pipeline(ws: &Workspace) -> Result<SweepReport> {
    let cfg = &ws.config;
    let fair = cfg.fair_methods()?;
    let (_, prepared) = simulate_and_prepare(ws)?;
    let baselines = prepared
        .diameters
        .par_iter()
        .map(|d| train_baselines(cfg, d))
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, MethodKind)> = (0..prepared.diameters.len())
        .flat_map(|i| fair.iter().map(move |m| (i, *m)))
        .collect();
    let curves = tasks
        .par_iter()
        .map(|&(i, m)| sweep_method(cfg, &prepared.diameters[i], &baselines[i], m))
        .collect::<Result<Vec<_>>>()?;

    let mut report = SweepReport {
        points: Vec::new(),
        baselines: Vec::new(),
        models: Vec::new(),
    };
    for b in &baselines {
        for (m, e) in &b.models {
            report.baselines.push((m.method.kind, b.diameter, e.accuracy, e.fairness.di));
            report.models.push((b.diameter, m.clone()));
        }
    }
    for curve in curves {
        for (p, m) in curve {
            report.models.push((p.diameter, m));
            report.points.push(p);
        }
    }
    Ok(report)
}

pub fn pareto_csv(report: &SweepReport) -> String {
    let mut out = String::from("method,d,hyper,ACC,DI\n");
    for (m, d, acc, di) in &report.baselines {
        writeln!(out, "{m},{d},,{acc},{di}").unwrap();
    }
    for p in &report.points {
        writeln!(out, "{},{},{},{},{}", p.method, p.diameter, p.hyper, p.accuracy, p.di).unwrap();
    }
    out
}

/// Writes `pareto.csv`, `models.csv` and one `pareto_d<cm>.svg` per diameter.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<SweepReport> {
    let ws = Workspace::load(cfg.clone())?;
    pool(jobs)?.install(|| {
        let report = sweep_pipeline(&ws)?;
        write_file(out, "pareto.csv", &pareto_csv(&report))?;
        write_file(out, "models.csv", &models_csv(report.models.iter().cloned())?)?;
        for &d in &cfg.scenarios.diameters {
            let name = format!("pareto_d{}.svg", (d * 100.0).round() as i64);
            write_file(out, &name, &svg::pareto_panel(&report, d))?;
        }
        Ok(report)
    })
}

/// A published row of the H-method table: `d` in centimeters followed by
/// ACC, max_k, min_k, DI, EO, tilde_DI, tilde_EO.
pub const PUBLISHED_TABLE: [[f64; 8]; 3] = [
    [5.0, 0.6223, 0.8468, 0.4880, 0.5763, 0.3558, 0.5763, 0.3588],
    [10.0, 0.7998, 0.9983, 0.6372, 0.6383, 0.3611, 0.6383, 0.3611],
    [15.0, 0.8837, 1.0000, 0.6402, 0.6402, 0.3598, 0.6402, 0.3598],
];

/// Published values carry four decimals.
pub const PUBLISHED_TOLERANCE: f64 = 5e-5;
pub const MODEL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub check: String,
    pub source: String,
    pub expected: f64,
    pub computed: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn abs_error(&self) -> f64 {
        (self.expected - self.computed).abs()
    }

    pub fn pass(&self) -> bool {
        self.abs_error() <= self.tolerance
    }
}

/// Identities on the published table. In the 5 cm row the EO entry
/// disagrees with its own tilde_EO; the tilde value is used there.
pub fn published_identity_checks() -> Vec<IdentityCheck> {
    let mut checks = Vec::new();
    for row in PUBLISHED_TABLE {
        let [d, _, max_k, min_k, di, eo, tilde_di, tilde_eo] = row;
        let source = format!("published d={d}");
        checks.push(IdentityCheck {
            check: "tilde_EO = (1 - DI) * max_k".into(),
            source: source.clone(),
            expected: tilde_eo,
            computed: fairness::eo_from_di(di, max_k).expect("max_k > 0"),
            tolerance: PUBLISHED_TOLERANCE,
        });
        let eo_used = if (eo - tilde_eo).abs() > PUBLISHED_TOLERANCE { tilde_eo } else { eo };
        checks.push(IdentityCheck {
            check: "tilde_DI = 1 - EO / max_k".into(),
            source: if eo_used == eo { source.clone() } else { format!("{source} (EO column replaced by tilde_EO)") },
            expected: tilde_di,
            computed: fairness::di_from_eo(eo_used, max_k).expect("max_k > 0"),
            tolerance: PUBLISHED_TOLERANCE,
        });
        checks.push(IdentityCheck {
            check: "DI = min_k / max_k".into(),
            source,
            expected: di,
            computed: min_k / max_k,
            tolerance: PUBLISHED_TOLERANCE,
        });
    }
    checks
}

/// Identities of one evaluated model on structured labels.
pub fn model_identity_checks(source: &str, e: &Evaluation) -> Vec<IdentityCheck> {
    let f = &e.fairness;
    let mut checks = vec![IdentityCheck {
        check: "EO = (1 - DI) * max_k".into(),
        source: source.into(),
        expected: f.eo,
        computed: (1.0 - f.di) * f.max_k,
        tolerance: MODEL_TOLERANCE,
    }];
    if f.max_k > 0.0 {
        checks.push(IdentityCheck {
            check: "DI = 1 - EO / max_k".into(),
            source: source.into(),
            expected: f.di,
            computed: 1.0 - f.eo / f.max_k,
            tolerance: MODEL_TOLERANCE,
        });
    }
    checks
}

pub fn identities_csv(checks: &[IdentityCheck]) -> String {
    let mut out = String::from("check,source,expected,computed,abs_error,tolerance,pass\n");
    for c in checks {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.check,
            c.source,
            c.expected,
            c.computed,
            c.abs_error(),
            c.tolerance,
            c.pass()
        )
        .unwrap();
    }
    out
}

/// Checks the identities on the published table and on every model of a
/// baseline run; writes `identities.csv`. Failures are rows, not errors.
pub fn run_identity_suite(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<Vec<IdentityCheck>> {
    let ws = Workspace::load(cfg.clone())?;
    pool(jobs)?.install(|| {
        let (_, report) = baseline_pipeline(&ws)?;
        let mut checks = published_identity_checks();
        for b in &report.baselines {
            for (m, e) in &b.models {
                checks.extend(model_identity_checks(&format!("{} d={} test", m.method.kind, b.diameter), e));
            }
        }
        write_file(out, "identities.csv", &identities_csv(&checks))?;
        Ok(checks)
    })
}
