//! Steady-state demand-driven solver on nodal heads.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{Network, NodeId, Pipe};

pub const GRAVITY: f64 = 9.81;
const HW_EXPONENT: f64 = 1.852;
const HW_COEFF: f64 = 10.667;
const DIAMETER_EXPONENT: f64 = 4.871;
/// Head differences below this (meters) use a linear pipe law.
const LINEAR_HEADLOSS: f64 = 1e-6;

/// Hazen-Williams resistance `R` with `hL = R * Q * |Q|^0.852`.
pub fn hazen_williams_resistance(pipe: &Pipe) -> f64 {
    HW_COEFF * pipe.length
        / (pipe.roughness.powf(HW_EXPONENT) * pipe.diameter.powf(DIAMETER_EXPONENT))
}

/// Signed head loss in meters for a signed flow in m^3/s.
pub fn headloss_hazen_williams(flow: f64, pipe: &Pipe) -> f64 {
    flow.signum() * hazen_williams_resistance(pipe) * flow.abs().powf(HW_EXPONENT)
}

/// Orifice outflow in m^3/s. Zero when the pressure head is not positive.
pub fn leak_flow(pressure_head: f64, diameter: f64, discharge_coeff: f64) -> f64 {
    if pressure_head <= 0.0 {
        return 0.0;
    }
    let area = std::f64::consts::PI * diameter * diameter / 4.0;
    discharge_coeff * area * (2.0 * GRAVITY * pressure_head).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leak {
    pub node: NodeId,
    pub diameter: f64,
    pub discharge_coeff: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Convergence bound on the worst nodal mass imbalance, m^3/s.
    pub mass_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 200,
            mass_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HydraulicSolution {
    /// Total head per junction, in `Network::nodes` order.
    pub heads: Vec<f64>,
    /// Pressure head (head minus elevation) per junction.
    pub pressures: Vec<f64>,
    /// Signed flow per pipe, positive from `from_node` to `to_node`.
    pub flows: Vec<f64>,
    pub leak_outflow: f64,
    pub iterations: usize,
    /// Worst nodal mass imbalance at the returned heads.
    pub mass_residual: f64,
    /// Lowest negative junction pressure, if any.
    pub negative_pressure: Option<(NodeId, f64)>,
}

#[derive(Clone, Copy)]
enum End {
    Junction(usize),
    Fixed(f64),
}

/// Precomputed topology and pipe resistances for repeated solves.
#[derive(Clone)]
pub struct HydraulicModel {
    junction_ids: Vec<NodeId>,
    elevations: Vec<f64>,
    index: HashMap<NodeId, usize>,
    pipes: Vec<(End, End, f64)>,
    max_fixed_head: f64,
}

impl HydraulicModel {
    pub fn new(net: &Network) -> Self {
        let index: HashMap<NodeId, usize> =
            net.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let fixed: HashMap<NodeId, f64> = net.reservoirs.iter().map(|r| (r.id, r.head)).collect();
        let end = |id: NodeId| match index.get(&id) {
            Some(&i) => End::Junction(i),
            None => End::Fixed(fixed[&id]),
        };
        let pipes = net
            .pipes
            .iter()
            .map(|p| (end(p.from_node), end(p.to_node), hazen_williams_resistance(p)))
            .collect();
        HydraulicModel {
            junction_ids: net.nodes.iter().map(|n| n.id).collect(),
            elevations: net.nodes.iter().map(|n| n.elevation).collect(),
            index,
            pipes,
            max_fixed_head: net
                .reservoirs
                .iter()
                .map(|r| r.head)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn junction_count(&self) -> usize {
        self.junction_ids.len()
    }

    pub fn junction_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    fn head_at(end: End, heads: &[f64]) -> f64 {
        match end {
            End::Junction(i) => heads[i],
            End::Fixed(h) => h,
        }
    }

    /// Flow from a head difference and its derivative. Below
    /// `LINEAR_HEADLOSS` the law is replaced by the secant through the origin,
    /// which removes the infinite slope at zero flow.
    fn pipe_flow(dh: f64, resistance: f64) -> (f64, f64) {
        let inv = 1.0 / HW_EXPONENT;
        if dh.abs() < LINEAR_HEADLOSS {
            let slope = (LINEAR_HEADLOSS / resistance).powf(inv) / LINEAR_HEADLOSS;
            return (slope * dh, slope);
        }
        let q = dh.signum() * (dh.abs() / resistance).powf(inv);
        (q, inv * q / dh)
    }

    /// Nodal mass imbalance `inflow - outflow - demand - leak` per junction.
    fn residual(
        &self,
        heads: &[f64],
        demands: &[f64],
        leak: Option<(usize, &Leak)>,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let mut f: Vec<f64> = demands.iter().map(|d| -d).collect();
        let mut flows = Vec::with_capacity(self.pipes.len());
        for &(a, b, r) in &self.pipes {
            let (q, _) = Self::pipe_flow(Self::head_at(a, heads) - Self::head_at(b, heads), r);
            if let End::Junction(i) = a {
                f[i] -= q;
            }
            if let End::Junction(j) = b {
                f[j] += q;
            }
            flows.push(q);
        }
        let mut outflow = 0.0;
        if let Some((i, l)) = leak {
            outflow = leak_flow(heads[i] - self.elevations[i], l.diameter, l.discharge_coeff);
            f[i] -= outflow;
        }
        (f, flows, outflow)
    }

    /// Solves for junction heads by damped Newton iteration.
    ///
    /// `demands` follows `Network::nodes` order. `initial` warm-starts the
    /// iteration (e.g. with the previous time step's heads).
    pub fn solve(
        &self,
        demands: &[f64],
        leak: Option<&Leak>,
        initial: Option<&[f64]>,
        opts: &SolverOptions,
    ) -> Result<HydraulicSolution> {
        let n = self.junction_count();
        if demands.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: demands.len(),
            });
        }
        if let Some(d) = demands.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::Precondition(format!("negative or NaN demand {d}")));
        }
        let leak = match leak {
            Some(l) => {
                let i = self.junction_index(l.node).ok_or_else(|| {
                    Error::Validation(format!("leak node {} is not a junction", l.node))
                })?;
                if !(l.diameter > 0.0) {
                    return Err(Error::Precondition("leak diameter must be positive".into()));
                }
                Some((i, l))
            }
            None => None,
        };

        let mut heads = match initial {
            Some(h) if h.len() == n => h.to_vec(),
            _ => vec![self.max_fixed_head; n],
        };
        let norm = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>();
        let (mut f, _, _) = self.residual(&heads, demands, leak);
        let mut iterations = 0;

        while f.iter().fold(0.0_f64, |m, v| m.max(v.abs())) > opts.mass_tolerance {
            if iterations == opts.max_iterations {
                let (worst, _) = f
                    .iter()
                    .enumerate()
                    .fold((0, 0.0_f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
                return Err(Error::SolverDiverged {
                    iterations,
                    worst_residual: f[worst].abs(),
                    node: self.junction_ids[worst],
                });
            }
            iterations += 1;

            // Negated Jacobian: symmetric positive definite when every
            // junction is connected to a fixed head.
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for &(a, b, r) in &self.pipes {
                let (_, g) = Self::pipe_flow(Self::head_at(a, &heads) - Self::head_at(b, &heads), r);
                match (a, b) {
                    (End::Junction(i), End::Junction(j)) => {
                        jac[(i, i)] += g;
                        jac[(j, j)] += g;
                        jac[(i, j)] -= g;
                        jac[(j, i)] -= g;
                    }
                    (End::Junction(i), End::Fixed(_)) | (End::Fixed(_), End::Junction(i)) => {
                        jac[(i, i)] += g;
                    }
                    (End::Fixed(_), End::Fixed(_)) => {}
                }
            }
            if let Some((i, l)) = leak {
                let p = heads[i] - self.elevations[i];
                if p > 0.0 {
                    let area = std::f64::consts::PI * l.diameter * l.diameter / 4.0;
                    jac[(i, i)] +=
                        l.discharge_coeff * area * (2.0 * GRAVITY).sqrt() / (2.0 * p.max(1e-6).sqrt());
                }
            }
            let rhs = DVector::from_column_slice(&f);
            let step = match jac.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => jac
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singular("nodal Jacobian".into()))?,
            };

            let base = norm(&f);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = heads.iter().zip(step.iter()).map(|(h, s)| h + alpha * s).collect();
                let (ft, _, _) = self.residual(&trial, demands, leak);
                if norm(&ft) < base {
                    heads = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Stalled at round-off level; the loop condition decides.
                if f.iter().fold(0.0_f64, |m, v| m.max(v.abs())) <= 1e3 * opts.mass_tolerance {
                    break;
                }
                iterations = opts.max_iterations;
            }
        }

        let (f, flows, leak_outflow) = self.residual(&heads, demands, leak);
        let pressures: Vec<f64> = heads.iter().zip(&self.elevations).map(|(h, z)| h - z).collect();
        let negative_pressure = pressures
            .iter()
            .enumerate()
            .filter(|(_, p)| **p < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, p)| (self.junction_ids[i], *p));
        Ok(HydraulicSolution {
            heads,
            pressures,
            flows,
            leak_outflow,
            iterations,
            mass_residual: f.iter().fold(0.0, |m, v| m.max(v.abs())),
            negative_pressure,
        })
    }
}

/// One-shot solve; see [`HydraulicModel::solve`].
pub fn solve_steady_state(
    net: &Network,
    demands: &[f64],
    leak: Option<&Leak>,
) -> Result<HydraulicSolution> {
    HydraulicModel::new(net).solve(demands, leak, None, &SolverOptions::default())
}
