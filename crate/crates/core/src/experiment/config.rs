use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::detector::SmoothingConfig;
use crate::error::{Error, Result};
use crate::hydrosim::SimulationConfig;
use crate::network::NodeId;
use crate::optimize::{MethodKind, MethodSpec, OptimOptions};
use crate::sensors::PreprocessConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPlan {
    /// Leak diameters in meters.
    pub diameters: Vec<f64>,
    /// Leak locations; `None` means every junction.
    pub nodes: Option<Vec<NodeId>>,
    pub leak_start: usize,
    pub leak_end: usize,
    /// Leak-free scenarios used to fit the virtual sensors.
    pub leak_free: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub c_start: f64,
    pub c_step: f64,
    pub lambda_start: f64,
    pub lambda_step: f64,
    pub max_steps: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            c_start: 0.001,
            c_step: 0.01,
            lambda_start: 1.0,
            lambda_step: -0.01,
            max_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: PathBuf,
    pub groups: PathBuf,
    pub simulation: SimulationConfig,
    pub scenarios: ScenarioPlan,
    pub preprocess: PreprocessConfig,
    pub methods: Vec<MethodKind>,
    pub smoothing: SmoothingConfig,
    pub barrier: Vec<f64>,
    pub optimizer: OptimOptions,
    pub train_fraction: f64,
    pub sweep: SweepPlan,
    pub seed: u64,
}

fn parse_node_list(kv: &KeyValues) -> Result<Option<Vec<NodeId>>> {
    match kv.get("scenarios.nodes").map(str::trim) {
        None | Some("all") => Ok(None),
        Some(_) => kv.list("scenarios.nodes"),
    }
}

impl ExperimentConfig {
    /// Relative paths are resolved against `base_dir`.
    pub fn from_key_values(kv: &KeyValues, base_dir: &Path) -> Result<Self> {
        let seed = kv.parse_or("seed", 42u64)?;
        let defaults = SimulationConfig::default();
        let simulation = SimulationConfig {
            timestep: kv.parse_or("sim.timestep", defaults.timestep)?,
            horizon: kv.parse_or("sim.horizon", defaults.horizon)?,
            amplitude: kv.parse_or("sim.amplitude", defaults.amplitude)?,
            sigma: kv.parse_or("sim.sigma", defaults.sigma)?,
            discharge_coeff: kv.parse_or("sim.discharge_coeff", defaults.discharge_coeff)?,
            seed,
        };
        let horizon = simulation.horizon;
        let scenarios = ScenarioPlan {
            diameters: kv.list("scenarios.diameters")?.unwrap_or_else(|| vec![0.05, 0.10, 0.15]),
            nodes: parse_node_list(kv)?,
            leak_start: kv.parse_or("scenarios.leak_start", horizon / 2)?,
            leak_end: kv.parse_or("scenarios.leak_end", horizon)?,
            leak_free: kv.parse_or("scenarios.leak_free", 10usize)?,
        };
        let methods = match kv.get("methods") {
            Some(text) => text
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<MethodKind>>>()?,
            None => MethodKind::ALL.to_vec(),
        };
        let sd = SweepPlan::default();
        let cfg = ExperimentConfig {
            network: base_dir.join(kv.require("network")?),
            groups: base_dir.join(kv.require("groups")?),
            simulation,
            scenarios,
            preprocess: PreprocessConfig {
                window: kv.parse_or("preprocess.window", 2usize)?,
                ridge_fallback: kv.parse_or("preprocess.ridge_fallback", true)?,
            },
            methods,
            smoothing: SmoothingConfig {
                b: kv.parse_or("smoothing.b", 100.0)?,
                t: kv.parse_or("smoothing.T", 0.8)?,
            },
            barrier: kv.list("barrier.mu")?.unwrap_or_else(|| vec![1.0, 0.1, 0.01]),
            optimizer: OptimOptions {
                max_iterations: kv.parse_or("optimizer.max_iterations", 200usize)?,
                tolerance: kv.parse_or("optimizer.tolerance", 1e-6)?,
            },
            train_fraction: kv.parse_or("train_fraction", 0.4)?,
            sweep: SweepPlan {
                c_start: kv.parse_or("sweep.c_start", sd.c_start)?,
                c_step: kv.parse_or("sweep.c_step", sd.c_step)?,
                lambda_start: kv.parse_or("sweep.lambda_start", sd.lambda_start)?,
                lambda_step: kv.parse_or("sweep.lambda_step", sd.lambda_step)?,
                max_steps: kv.parse_or("sweep.max_steps", sd.max_steps)?,
            },
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        Self::from_key_values(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    /// Replaces the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.simulation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.smoothing.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.sweep.c_step == 0.0 || self.sweep.lambda_step == 0.0 || !self.sweep.c_step.is_finite() || !self.sweep.lambda_step.is_finite() {
            return Err(Error::Config("sweep steps must be nonzero".into()));
        }
        let s = &self.scenarios;
        if s.diameters.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("leak diameters must be positive".into()));
        }
        if !(s.leak_start < s.leak_end && s.leak_end <= self.simulation.horizon) {
            return Err(Error::Config(format!(
                "leak window [{}, {}) must lie inside the horizon {}",
                s.leak_start, s.leak_end, self.simulation.horizon
            )));
        }
        if self.preprocess.window >= s.leak_start {
            return Err(Error::Config("rolling window must end before the leak starts".into()));
        }
        self.method_spec(MethodKind::Acc, 0.0).validate()
    }

    /// Method spec sharing the configured smoothing, barrier and budget.
    pub fn method_spec(&self, kind: MethodKind, hyper: f64) -> MethodSpec {
        MethodSpec {
            kind,
            hyper,
            smoothing: self.smoothing,
            barrier: self.barrier.clone(),
            budget: self.optimizer,
        }
    }

    /// Fairness methods to sweep, each checked for its baseline partner.
    pub fn fair_methods(&self) -> Result<Vec<MethodKind>> {
        let fair: Vec<MethodKind> = self.methods.iter().copied().filter(|m| m.is_fair()).collect();
        if fair.is_empty() {
            return Err(Error::Config("sweep needs at least one fairness method".into()));
        }
        for m in &fair {
            let partner = m.baseline_partner().expect("fair methods have partners");
            if !self.methods.contains(&partner) {
                return Err(Error::Config(format!("{m} needs its baseline partner {partner} in `methods`")));
            }
        }
        Ok(fair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        "network = a.inp\ngroups = g.conf\n".to_string()
    }

    #[test]
    fn defaults() {
        let kv = KeyValues::parse(&base()).unwrap();
        let cfg = ExperimentConfig::from_key_values(&kv, Path::new("/x")).unwrap();
        assert_eq!(cfg.network, PathBuf::from("/x/a.inp"));
        assert_eq!(cfg.train_fraction, 0.4);
        assert_eq!(cfg.scenarios.diameters, vec![0.05, 0.10, 0.15]);
        assert_eq!(cfg.scenarios.nodes, None);
        assert_eq!(cfg.methods.len(), 6);
        assert_eq!(cfg.sweep, SweepPlan::default());
    }

    #[test]
    fn rejects_bad_values() {
        for extra in ["train_fraction = 1.0", "sweep.c_step = 0", "scenarios.leak_start = 400", "methods = H,XYZ"] {
            let kv = KeyValues::parse(&format!("{}{extra}\n", base())).unwrap();
            assert!(ExperimentConfig::from_key_values(&kv, Path::new(".")).is_err(), "{extra}");
        }
    }

    #[test]
    fn sweep_needs_partner() {
        let kv = KeyValues::parse(&format!("{}methods = H,ACC+F\n", base())).unwrap();
        let cfg = ExperimentConfig::from_key_values(&kv, Path::new(".")).unwrap();
        assert!(matches!(cfg.fair_methods(), Err(Error::Config(m)) if m.contains("ACC")));
        let kv = KeyValues::parse(&format!("{}methods = H,ACC\n", base())).unwrap();
        let cfg = ExperimentConfig::from_key_values(&kv, Path::new(".")).unwrap();
        assert!(cfg.fair_methods().is_err());
    }

    #[test]
    fn explicit_nodes_and_seed() {
        let kv = KeyValues::parse(&format!("{}scenarios.nodes = 3,4\nseed = 7\n", base())).unwrap();
        let cfg = ExperimentConfig::from_key_values(&kv, Path::new(".")).unwrap();
        assert_eq!(cfg.scenarios.nodes, Some(vec![3, 4]));
        assert_eq!(cfg.simulation.seed, 7);
        assert_eq!(cfg.with_seed(9).simulation.seed, 9);
    }
}
