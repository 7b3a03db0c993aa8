//! Unconstrained minimizers and the log-barrier transform.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Gradient-norm bound for BFGS, simplex-diameter bound for Nelder-Mead.
    pub tolerance: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// BFGS with an inverse-Hessian update and Armijo backtracking.
///
/// `f` returns the objective and writes the gradient into its second
/// argument. Points where `f` is not finite are rejected by the line search,
/// so `+inf` works as an infeasibility sentinel.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer(format!("objective not finite at the start point: {fx}")));
    }
    let mut h = identity(n);
    let gnorm = norm(&g);
    if gnorm > 1.0 {
        h.iter_mut().for_each(|v| *v /= gnorm);
    }
    let mut first_step = true;
    let mut p = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut hy = vec![0.0; n];

    for iter in 0..opts.max_iterations {
        if norm(&g) <= opts.tolerance {
            return Ok(OptimResult { x, value: fx, iterations: iter, converged: true });
        }
        mat_vec(&h, &g, &mut p);
        p.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            h = identity(n);
            p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi = -gi);
            slope = dot(&g, &p);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + alpha * p[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * alpha * slope && g_new.iter().all(|v| v.is_finite()) {
                accepted = Some(f_new);
                break;
            }
            alpha *= 0.5;
        }
        let Some(f_new) = accepted else {
            log::debug!("bfgs: line search failed at iteration {iter}");
            return Ok(OptimResult { x, value: fx, iterations: iter, converged: false });
        };

        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        let decrease = fx - f_new;
        fx = f_new;

        if norm(&s) <= 1e-15 * (1.0 + norm(&x)) || decrease <= 0.0 {
            return Ok(OptimResult { x, value: fx, iterations: iter + 1, converged: norm(&g) <= opts.tolerance });
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if first_step {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= scale);
                first_step = false;
            }
            mat_vec(&h, &y, &mut hy);
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            // H+ = H - rho (Hy s' + s y'H) + (rho^2 y'Hy + rho) s s'
            let coef = rho * rho * yhy + rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + coef * s[i] * s[j];
                }
            }
        }
    }
    let converged = norm(&g) <= opts.tolerance;
    Ok(OptimResult { x, value: fx, iterations: opts.max_iterations, converged })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = dot(&m[i * n..(i + 1) * n], v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Stop once every vertex lies within this distance of the best one.
    pub tolerance: f64,
    /// Initial edge length relative to `|x0_j|`.
    pub relative_step: f64,
    /// Initial edge length where `x0_j = 0`.
    pub absolute_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iterations: 2000,
            tolerance: 1e-8,
            relative_step: 0.05,
            absolute_step: 0.00025,
        }
    }
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Downhill simplex search. `f` may return `+inf` outside its domain but must
/// be finite at `x0`.
pub fn nelder_mead_minimize<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::Optimizer(format!("objective not finite at the start point: {f0}")));
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += if x0[j] != 0.0 { opts.relative_step * x0[j].abs() } else { opts.absolute_step };
        let fv = sanitize(f(&v));
        simplex.push((v, fv));
    }

    let point = |centroid: &[f64], worst: &[f64], t: f64| -> Vec<f64> {
        centroid.iter().zip(worst).map(|(c, w)| c + t * (c - w)).collect()
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter <= opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let (worst, f_worst) = simplex[n].clone();
        let f_best = simplex[0].1;
        let f_second = simplex[n - 1].1;

        let xr = point(&centroid, &worst, REFLECT);
        let fr = sanitize(f(&xr));
        if fr < f_best {
            let xe = point(&centroid, &worst, EXPAND);
            let fe = sanitize(f(&xe));
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < f_worst {
            let xc = point(&centroid, &worst, CONTRACT);
            let fc = sanitize(f(&xc));
            (xc, fc)
        } else {
            let xc = point(&centroid, &worst, -CONTRACT);
            let fc = sanitize(f(&xc));
            (xc, fc)
        };
        if fc < fr.min(f_worst) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for (v, fv) in simplex.iter_mut().skip(1) {
            for (x, b) in v.iter_mut().zip(&best) {
                *x = b + SHRINK * (*x - b);
            }
            *fv = sanitize(f(v));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Ok(OptimResult { x, value, iterations, converged })
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// `loss - mu * sum_k log C_k`, or `+inf` when some `C_k <= 0`.
pub fn barrier_value(loss: f64, constraints: &[f64], mu: f64) -> f64 {
    let mut penalty = 0.0;
    for &c in constraints {
        if !(c > 0.0) {
            return f64::INFINITY;
        }
        penalty -= c.ln();
    }
    loss + mu * penalty
}

/// Closure form of [`barrier_value`].
pub fn barrier_objective<L, C>(loss: L, constraints: C, mu: f64) -> impl Fn(&[f64]) -> f64
where
    L: Fn(&[f64]) -> f64,
    C: Fn(&[f64]) -> Vec<f64>,
{
    move |x| {
        let c = constraints(x);
        if c.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        barrier_value(loss(x), &c, mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn bfgs_rosenbrock() {
        let opts = OptimOptions { max_iterations: 500, tolerance: 1e-10 };
        let r = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn bfgs_ill_conditioned_quadratic() {
        // Diagonal spectrum 1..100 rotated by a fixed Householder reflection.
        let n = 10;
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let vv = dot(&v, &v);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let qi = |k: usize| if i == k { 1.0 } else { 0.0 } - 2.0 * v[i] * v[k] / vv;
                let qj = |k: usize| if j == k { 1.0 } else { 0.0 } - 2.0 * v[j] * v[k] / vv;
                a[i * n + j] = (0..n).map(|k| qi(k) * (1.0 + 99.0 * k as f64 / 9.0) * qj(k)).sum();
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let f = |x: &[f64], g: &mut [f64]| {
            mat_vec(&a, x, g);
            let val = 0.5 * dot(x, g) - dot(&b, x);
            g.iter_mut().zip(&b).for_each(|(gi, bi)| *gi -= bi);
            val
        };
        let r = bfgs_minimize(f, &vec![1.0; n], &OptimOptions { max_iterations: 200, tolerance: 1e-6 }).unwrap();
        assert!(r.converged, "{r:?}");
        let mut ax = vec![0.0; n];
        mat_vec(&a, &r.x, &mut ax);
        assert!(ax.iter().zip(&b).all(|(l, r)| (l - r).abs() < 1e-5));
    }

    #[test]
    fn bfgs_rejects_nonfinite_start() {
        let f = |_: &[f64], _: &mut [f64]| f64::INFINITY;
        assert!(bfgs_minimize(f, &[0.0], &OptimOptions::default()).is_err());
    }

    #[test]
    fn bfgs_respects_infinite_sentinel() {
        // Minimum of (x - 2)^2 restricted to x < 1 by an infinite wall.
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            if x[0] >= 1.0 {
                f64::INFINITY
            } else {
                (x[0] - 2.0).powi(2)
            }
        };
        let r = bfgs_minimize(f, &[0.0], &OptimOptions::default()).unwrap();
        assert!(r.x[0] < 1.0 && r.value <= 4.0);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
        let r = nelder_mead_minimize(f, &[0.0, 0.0], &NelderMeadOptions { relative_step: 0.5, absolute_step: 0.5, ..Default::default() }).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-4 && (r.x[1] + 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn nelder_mead_box_sentinel() {
        let f = |x: &[f64]| {
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                f64::INFINITY
            } else {
                x.iter().map(|v| (v - 0.5).powi(2)).sum()
            }
        };
        let r = nelder_mead_minimize(f, &[0.9, 0.1, 0.2], &NelderMeadOptions { relative_step: 0.2, ..Default::default() }).unwrap();
        assert!(r.x.iter().all(|v| (v - 0.5).abs() < 1e-4), "{r:?}");
    }

    #[test]
    fn nelder_mead_constant_returns_start() {
        let r = nelder_mead_minimize(|_| 7.0, &[0.3, -2.0], &NelderMeadOptions::default()).unwrap();
        assert_eq!(r.x, vec![0.3, -2.0]);
        assert_eq!(r.value, 7.0);
    }

    #[test]
    fn nelder_mead_infeasible_start() {
        assert!(nelder_mead_minimize(|_| f64::INFINITY, &[0.0], &NelderMeadOptions::default()).is_err());
    }

    #[test]
    fn barrier_examples() {
        assert_eq!(barrier_value(1.5, &[], 0.3), 1.5);
        assert_eq!(barrier_value(1.5, &[1.0], 0.1), 1.5);
        assert!((barrier_value(0.0, &[0.5], 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(barrier_value(0.0, &[0.5, 0.0], 1.0), f64::INFINITY);
        let obj = barrier_objective(|x| x[0], |x| vec![1.0 - x[0]], 1.0);
        assert_eq!(obj(&[2.0]), f64::INFINITY);
        assert!((obj(&[0.5]) - (0.5 + std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn barrier_path_matches_closed_form() {
        // min (x - a)^2 subject to x <= c. The barrier minimizer solves
        // 2 (x - a)(c - x) = mu, i.e. the smaller root of a quadratic.
        let (a, c) = (2.0, 1.0);
        let mut x = vec![0.0];
        let mut last = f64::INFINITY;
        for mu in [1.0, 0.1, 0.01, 0.001] {
            let f = |v: &[f64], g: &mut [f64]| {
                let slack = c - v[0];
                g[0] = 2.0 * (v[0] - a) + mu / slack;
                barrier_value((v[0] - a).powi(2), &[slack], mu)
            };
            let r = bfgs_minimize(f, &x, &OptimOptions { max_iterations: 200, tolerance: 1e-10 }).unwrap();
            let s = a + c;
            let oracle = (s - (s * s - 4.0 * (a * c - mu / 2.0)).sqrt()) / 2.0;
            assert!((r.x[0] - oracle).abs() < 1e-4, "mu={mu} got {} want {oracle}", r.x[0]);
            let unpenalized = (r.x[0] - a).powi(2);
            assert!(unpenalized <= last + 1e-12);
            last = unpenalized;
            x = r.x;
        }
    }

    proptest! {
        #[test]
        fn bfgs_random_convex_quadratics(seed in any::<u64>()) {
            let n = 10;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |x: &[f64], g: &mut [f64]| {
                mat_vec(&a, x, g);
                let val = 0.5 * dot(x, g) - dot(&b, x);
                g.iter_mut().zip(&b).for_each(|(gi, bi)| *gi -= bi);
                val
            };
            let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g0 = vec![0.0; n];
            let f0 = f(&x0, &mut g0);
            let r = bfgs_minimize(f, &x0, &OptimOptions { max_iterations: 200, tolerance: 1e-6 }).unwrap();
            prop_assert!(r.converged);
            prop_assert!(r.value <= f0);
        }
    }
}
