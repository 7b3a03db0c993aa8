//! Pressure time series for leak scenarios.
//!
//! Every time step is an independent steady-state snapshot. Junction demands
//! follow a diurnal sinusoid with multiplicative lognormal noise; a leak is a
//! pressure-dependent orifice at one junction.

mod hydraulics;

pub use hydraulics::{
    hazen_williams_resistance, headloss_hazen_williams, leak_flow, solve_steady_state,
    HydraulicModel, HydraulicSolution, Leak, SolverOptions, GRAVITY,
};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::csvfmt;
use crate::error::{Error, Result};
use crate::network::{GroupAssignment, Network, NodeId, SensorSet};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Sampling interval in seconds.
    pub timestep: f64,
    /// Steps per scenario.
    pub horizon: usize,
    /// Diurnal amplitude as a fraction of base demand.
    pub amplitude: f64,
    /// Sigma of the multiplicative lognormal demand noise.
    pub sigma: f64,
    pub discharge_coeff: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            timestep: 600.0,
            horizon: 288,
            amplitude: 0.1,
            sigma: 0.05,
            discharge_coeff: 0.75,
            seed: 42,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0) {
            return Err(Error::Config("timestep must be positive".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2 steps".into()));
        }
        if !(0.0..1.0).contains(&self.amplitude) {
            return Err(Error::Config("amplitude must lie in [0, 1)".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be nonnegative".into()));
        }
        if !(self.discharge_coeff > 0.0) {
            return Err(Error::Config("discharge coefficient must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakSpec {
    pub node: NodeId,
    /// Meters.
    pub diameter: f64,
    pub start_step: usize,
    /// Exclusive.
    pub end_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSpec {
    /// Scenario index; selects the random stream.
    pub index: usize,
    pub leak: Option<LeakSpec>,
}

impl ScenarioSpec {
    pub fn leak_free(index: usize) -> Self {
        ScenarioSpec { index, leak: None }
    }

    pub fn is_active(&self, step: usize) -> bool {
        self.leak
            .is_some_and(|l| l.start_step <= step && step < l.end_step)
    }
}

/// Pressure heads at the sensor nodes for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureDataset {
    pub scenario_id: usize,
    /// Generating spec; `None` for datasets read back from CSV.
    pub spec: Option<ScenarioSpec>,
    pub sensor_ids: Vec<NodeId>,
    pub group_count: usize,
    /// Seconds since the scenario start.
    pub times: Vec<f64>,
    /// `[steps][sensors]` pressure heads in meters.
    pub pressures: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    /// Group of the active leak per step, `None` when no leak is active.
    pub leak_group: Vec<Option<usize>>,
}

impl PressureDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `s_k(t_i)`.
    pub fn group_label(&self, step: usize, group: usize) -> bool {
        self.leak_group[step] == Some(group)
    }

    /// Sensitive-feature structure: a group flag implies a leak label and every
    /// leak label carries exactly one group flag.
    pub fn check_labels(&self) -> Result<()> {
        for (i, (&y, g)) in self.labels.iter().zip(&self.leak_group).enumerate() {
            if y != g.is_some() {
                return Err(Error::Validation(format!(
                    "scenario {} step {i}: leak label and group flags disagree",
                    self.scenario_id
                )));
            }
            if g.is_some_and(|k| k >= self.group_count) {
                return Err(Error::Validation(format!(
                    "scenario {} step {i}: group index out of range",
                    self.scenario_id
                )));
            }
        }
        Ok(())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream owned by one scenario.
pub fn stream_seed(master: u64, scenario: usize) -> u64 {
    mix64(master ^ mix64(scenario as u64))
}

/// Simulates one scenario step by step, warm-starting each solve from the
/// previous heads.
pub fn simulate_scenario(
    net: &Network,
    sensors: &SensorSet,
    groups: &GroupAssignment,
    spec: &ScenarioSpec,
    cfg: &SimulationConfig,
) -> Result<PressureDataset> {
    simulate_with_model(&HydraulicModel::new(net), net, sensors, groups, spec, cfg)
}

pub fn simulate_with_model(
    model: &HydraulicModel,
    net: &Network,
    sensors: &SensorSet,
    groups: &GroupAssignment,
    spec: &ScenarioSpec,
    cfg: &SimulationConfig,
) -> Result<PressureDataset> {
    cfg.validate()?;
    let scenario_err = |step: usize, e: Error| Error::Scenario {
        scenario: spec.index,
        step,
        source: Box::new(e),
    };
    let leak = match spec.leak {
        Some(l) => {
            if !(l.start_step < l.end_step && l.end_step <= cfg.horizon) {
                return Err(Error::Precondition(format!(
                    "scenario {}: leak window [{}, {}) outside horizon {}",
                    spec.index, l.start_step, l.end_step, cfg.horizon
                )));
            }
            let group = groups.group_of(l.node).ok_or_else(|| {
                Error::Validation(format!("leak node {} has no group", l.node))
            })?;
            Some((
                Leak {
                    node: l.node,
                    diameter: l.diameter,
                    discharge_coeff: cfg.discharge_coeff,
                },
                group,
            ))
        }
        None => None,
    };
    let sensor_idx: Vec<usize> = sensors
        .ids()
        .iter()
        .map(|&id| {
            model
                .junction_index(id)
                .ok_or_else(|| Error::Validation(format!("sensor {id} is not a junction")))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, spec.index));
    let noise = LogNormal::new(0.0, cfg.sigma)
        .map_err(|e| Error::Config(format!("demand noise: {e}")))?;
    let opts = SolverOptions::default();

    let mut out = PressureDataset {
        scenario_id: spec.index,
        spec: Some(*spec),
        sensor_ids: sensors.ids().to_vec(),
        group_count: groups.group_count(),
        times: Vec::with_capacity(cfg.horizon),
        pressures: Vec::with_capacity(cfg.horizon),
        labels: Vec::with_capacity(cfg.horizon),
        leak_group: Vec::with_capacity(cfg.horizon),
    };
    let mut heads: Option<Vec<f64>> = None;
    for step in 0..cfg.horizon {
        let t = step as f64 * cfg.timestep;
        let diurnal = 1.0
            + cfg.amplitude
                * (2.0 * std::f64::consts::PI * (t % SECONDS_PER_DAY) / SECONDS_PER_DAY).sin();
        let demands: Vec<f64> = net
            .nodes
            .iter()
            .map(|n| n.base_demand * diurnal * noise.sample(&mut rng))
            .collect();
        let active = spec.is_active(step);
        let step_leak = leak.filter(|_| active).map(|(l, _)| l);
        let sol = model
            .solve(&demands, step_leak.as_ref(), heads.as_deref(), &opts)
            .map_err(|e| scenario_err(step, e))?;
        if let Some((node, head)) = sol.negative_pressure {
            return Err(scenario_err(step, Error::NegativePressure { node, head }));
        }
        out.times.push(t);
        out.pressures
            .push(sensor_idx.iter().map(|&i| sol.pressures[i]).collect());
        out.labels.push(active);
        out.leak_group.push(leak.filter(|_| active).map(|(_, g)| g));
        heads = Some(sol.heads);
    }
    Ok(out)
}

/// Writes datasets as one CSV:
/// `time,p_<id1>,...,p_<idd>,y,s_1,...,s_K,scenario_id`.
pub fn write_dataset_csv(datasets: &[PressureDataset]) -> Result<String> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Precondition("no datasets to write".into()))?;
    let mut out = String::from("time");
    for id in &first.sensor_ids {
        let _ = write!(out, ",p_{id}");
    }
    out.push_str(",y");
    for k in 1..=first.group_count {
        let _ = write!(out, ",s_{k}");
    }
    out.push_str(",scenario_id\n");
    for ds in datasets {
        if ds.sensor_ids != first.sensor_ids || ds.group_count != first.group_count {
            return Err(Error::Validation(format!(
                "scenario {} has a different sensor or group layout",
                ds.scenario_id
            )));
        }
        for i in 0..ds.len() {
            out.push_str(&ds.times[i].to_string());
            for p in &ds.pressures[i] {
                out.push(',');
                out.push_str(&csvfmt::sig(*p, 9));
            }
            let _ = write!(out, ",{}", u8::from(ds.labels[i]));
            for k in 0..ds.group_count {
                let _ = write!(out, ",{}", u8::from(ds.group_label(i, k)));
            }
            let _ = writeln!(out, ",{}", ds.scenario_id);
        }
    }
    Ok(out)
}

/// Reads the format produced by [`write_dataset_csv`]; rows are grouped by
/// consecutive `scenario_id`.
pub fn read_dataset_csv(text: &str) -> Result<Vec<PressureDataset>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty dataset file"))?;
    let cols = csvfmt::fields(header);
    let y_pos = cols
        .iter()
        .position(|c| *c == "y")
        .ok_or_else(|| Error::parse(1, "missing `y` column"))?;
    if cols.first() != Some(&"time") || cols.last() != Some(&"scenario_id") {
        return Err(Error::parse(1, "expected `time` first and `scenario_id` last"));
    }
    let sensor_ids: Vec<NodeId> = cols[1..y_pos]
        .iter()
        .map(|c| {
            c.strip_prefix("p_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(1, format!("bad pressure column `{c}`")))
        })
        .collect::<Result<_>>()?;
    let group_count = cols.len() - y_pos - 2;
    for (k, c) in cols[y_pos + 1..cols.len() - 1].iter().enumerate() {
        if *c != format!("s_{}", k + 1) {
            return Err(Error::parse(1, format!("bad group column `{c}`")));
        }
    }

    let mut out: Vec<PressureDataset> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let f = csvfmt::fields(line);
        if f.len() != cols.len() {
            return Err(Error::parse(line_no, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::parse(line_no, format!("invalid number `{s}`")))
        };
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::parse(line_no, format!("invalid flag `{s}`"))),
            }
        };
        let scenario_id: usize = f[cols.len() - 1]
            .parse()
            .map_err(|_| Error::parse(line_no, "invalid scenario_id"))?;
        if out.last().is_none_or(|d| d.scenario_id != scenario_id) {
            out.push(PressureDataset {
                scenario_id,
                spec: None,
                sensor_ids: sensor_ids.clone(),
                group_count,
                times: Vec::new(),
                pressures: Vec::new(),
                labels: Vec::new(),
                leak_group: Vec::new(),
            });
        }
        let ds = out.last_mut().expect("pushed above");
        ds.times.push(num(f[0])?);
        ds.pressures
            .push(f[1..y_pos].iter().map(|s| num(s)).collect::<Result<_>>()?);
        ds.labels.push(flag(f[y_pos])?);
        let mut group = None;
        for k in 0..group_count {
            if flag(f[y_pos + 1 + k])? {
                if group.is_some() {
                    return Err(Error::parse(line_no, "more than one active group"));
                }
                group = Some(k);
            }
        }
        ds.leak_group.push(group);
    }
    for ds in &out {
        ds.check_labels()?;
    }
    Ok(out)
}
