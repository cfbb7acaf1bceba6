//! Finite-horizon optimal control by single shooting and the weighted-sum
//! Pareto front.
//!
//! The control sequence is optimised with a spectral projected gradient
//! method (Barzilai–Borwein steps, nonmonotone backtracking, projection onto
//! the input box). Gradients come from the adjoint recursion. State
//! constraints enter as a quadratic penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{DomainError, Expr};
use crate::model::{Interval, Problem, WeightError, Weights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("initial state has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial state outside the state constraints")]
    InitialState,
    #[error("domain error along the rollout: {0}")]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("no restart produced a finite objective")]
    NoFiniteStart,
}

#[derive(Debug, Clone)]
pub struct OcpOptions {
    pub max_iterations: usize,
    /// Tolerance on `‖P(u − ∇J) − u‖∞`.
    pub tolerance: f64,
    /// Random restarts in addition to the zero (or warm) start.
    pub restarts: usize,
    pub seed: u64,
    /// Weight of the quadratic state-constraint penalty.
    pub penalty: f64,
}

impl Default for OcpOptions {
    fn default() -> Self {
        OcpOptions {
            max_iterations: 50_000,
            tolerance: 1e-8,
            restarts: 5,
            seed: 0,
            penalty: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// `x(0), …, x(N)`.
    pub x: Vec<Vec<f64>>,
    /// `u(0), …, u(N − 1)`.
    pub u: Vec<Vec<f64>>,
    /// `Σₖ ℓ_μ(x(k), u(k))`.
    pub j: f64,
    /// `Σₖ ℓᵢ(x(k), u(k))` per cost.
    pub j_components: Vec<f64>,
    /// State-constraint penalty at the solution.
    pub penalty: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `‖P(u − ∇J) − u‖∞` at the solution.
    pub stationarity: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

struct Shooting<'a> {
    p: &'a Problem,
    cost: Expr,
    x0: Vec<f64>,
    horizon: usize,
    penalty: f64,
    ubox: Vec<Interval>,
}

impl<'a> Shooting<'a> {
    fn m(&self) -> usize {
        self.p.m
    }

    fn project(&self, u: &mut [f64]) {
        let m = self.m();
        for (i, v) in u.iter_mut().enumerate() {
            let b = self.ubox[i % m];
            *v = v.clamp(b.lo, b.hi);
        }
    }

    fn rollout(&self, u: &[f64]) -> Result<Vec<Vec<f64>>, DomainError> {
        let m = self.m();
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(self.x0.clone());
        for k in 0..self.horizon {
            let next = self.p.eval_dynamics(&xs[k], &u[k * m..(k + 1) * m])?;
            xs.push(next);
        }
        Ok(xs)
    }

    /// Squared distance of `x` to the state box and its gradient.
    fn violation(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut v = 0.0;
        let mut g = vec![0.0; x.len()];
        for (i, (xi, b)) in x.iter().zip(&self.p.state_bounds).enumerate() {
            let d = if *xi < b.lo {
                xi - b.lo
            } else if *xi > b.hi {
                xi - b.hi
            } else {
                0.0
            };
            v += d * d;
            g[i] = 2.0 * d;
        }
        (v, g)
    }

    fn objective(&self, u: &[f64]) -> Result<f64, DomainError> {
        let m = self.m();
        let xs = self.rollout(u)?;
        let mut j = 0.0;
        for k in 0..self.horizon {
            j += self.cost.eval(&xs[k], &u[k * m..(k + 1) * m])?;
        }
        for x in &xs[1..] {
            j += self.penalty * self.violation(x).0;
        }
        if j.is_finite() {
            Ok(j)
        } else {
            Err(DomainError::NonFinite)
        }
    }

    /// Objective and gradient by the adjoint recursion
    /// `pₖ = ∂ₓℓ + f_xᵀ pₖ₊₁`, `∂J/∂uₖ = ∂ᵤℓ + f_uᵀ pₖ₊₁`.
    fn gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>), DomainError> {
        let (n, m) = (self.p.n, self.m());
        let xs = self.rollout(u)?;
        let mut j = 0.0;
        for x in &xs[1..] {
            j += self.penalty * self.violation(x).0;
        }
        let (_, mut adj) = self.violation(&xs[self.horizon]);
        adj.iter_mut().for_each(|a| *a *= self.penalty);
        let mut grad = vec![0.0; self.horizon * m];
        for k in (0..self.horizon).rev() {
            let uk = &u[k * m..(k + 1) * m];
            let l = self.cost.eval_jet1(&xs[k], uk)?;
            let fs = self.p.dynamics_jet1(&xs[k], uk)?;
            j += l.value;
            for c in 0..m {
                grad[k * m + c] = l.grad[n + c] + fs.iter().zip(&adj).map(|(f, a)| f.grad[n + c] * a).sum::<f64>();
            }
            let mut next = vec![0.0; n];
            for (r, nr) in next.iter_mut().enumerate() {
                *nr = l.grad[r] + fs.iter().zip(&adj).map(|(f, a)| f.grad[r] * a).sum::<f64>();
            }
            if k > 0 {
                let (_, g) = self.violation(&xs[k]);
                for (nr, gr) in next.iter_mut().zip(g) {
                    *nr += self.penalty * gr;
                }
            }
            adj = next;
        }
        if j.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Ok((j, grad))
        } else {
            Err(DomainError::NonFinite)
        }
    }

    fn stationarity(&self, u: &[f64], g: &[f64]) -> f64 {
        let mut t: Vec<f64> = u.iter().zip(g).map(|(a, b)| a - b).collect();
        self.project(&mut t);
        t.iter().zip(u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Spectral projected gradient from `u`. Returns the best iterate.
    fn spg(&self, mut u: Vec<f64>, opts: &OcpOptions) -> Result<Run, DomainError> {
        const MEMORY: usize = 10;
        const GAMMA: f64 = 1e-4;
        self.project(&mut u);
        let (mut f, mut g) = self.gradient(&u)?;
        let mut recent = vec![f; 1];
        let mut alpha = 1.0 / self.stationarity(&u, &g).max(1.0);
        let mut iterations = 0;
        let mut pg = self.stationarity(&u, &g);
        while pg > opts.tolerance && iterations < opts.max_iterations {
            iterations += 1;
            let mut d: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            self.project(&mut d);
            d.iter_mut().zip(&u).for_each(|(di, ui)| *di -= ui);
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);

            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + lambda * b).collect();
                if let Ok(ft) = self.objective(&trial) {
                    if ft <= reference + GAMMA * lambda * slope {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                lambda *= 0.5;
            }
            let Some((next, _)) = accepted else { break };
            let Ok((fn_, gn)) = self.gradient(&next) else { break };
            let s: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sts: f64 = s.iter().map(|v| v * v).sum();
            let sty: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            alpha = if sty > 0.0 { (sts / sty).clamp(1e-12, 1e12) } else { 1e6 };
            if sts == 0.0 {
                break;
            }
            u = next;
            f = fn_;
            g = gn;
            pg = self.stationarity(&u, &g);
            recent.push(f);
            if recent.len() > MEMORY {
                recent.remove(0);
            }
        }
        Ok(Run {
            u,
            objective: f,
            stationarity: pg,
            iterations,
            converged: pg <= opts.tolerance,
        })
    }

    fn trajectory(&self, run: &Run) -> Result<Trajectory, DomainError> {
        let m = self.m();
        let xs = self.rollout(&run.u)?;
        let mut j_components = vec![0.0; self.p.num_costs()];
        let mut j = 0.0;
        for k in 0..self.horizon {
            let uk = &run.u[k * m..(k + 1) * m];
            j += self.cost.eval(&xs[k], uk)?;
            for (c, l) in j_components.iter_mut().zip(&self.p.costs) {
                *c += l.eval(&xs[k], uk)?;
            }
        }
        let penalty = xs[1..].iter().map(|x| self.penalty * self.violation(x).0).sum();
        Ok(Trajectory {
            x: xs,
            u: run.u.chunks(m.max(1)).map(<[f64]>::to_vec).take(self.horizon).collect(),
            j,
            j_components,
            penalty,
            converged: run.converged,
            iterations: run.iterations,
            stationarity: run.stationarity,
        })
    }
}

struct Run {
    u: Vec<f64>,
    objective: f64,
    stationarity: f64,
    iterations: usize,
    converged: bool,
}

fn shooting<'a>(p: &'a Problem, w: &Weights, x0: &[f64], horizon: usize, opts: &OcpOptions) -> Result<Shooting<'a>, OcpError> {
    if horizon == 0 {
        return Err(OcpError::Horizon);
    }
    if x0.len() != p.n {
        return Err(OcpError::Dimension {
            expected: p.n,
            got: x0.len(),
        });
    }
    if !p.state_admissible(x0, 0.0) {
        return Err(OcpError::InitialState);
    }
    Ok(Shooting {
        p,
        cost: p.combine_costs(w)?,
        x0: x0.to_vec(),
        horizon,
        penalty: opts.penalty,
        ubox: p.input_bounds.clone(),
    })
}

/// Minimise `Σₖ ℓ_μ(x(k), u(k))` over `N` steps from `x0`, starting from
/// zero controls (projected) and `opts.restarts` seeded random sequences.
pub fn solve_ocp(p: &Problem, w: &Weights, x0: &[f64], horizon: usize, opts: &OcpOptions) -> Result<Trajectory, OcpError> {
    solve_ocp_warm(p, w, x0, horizon, &[], opts)
}

/// As [`solve_ocp`], with additional initial control sequences.
pub fn solve_ocp_warm(
    p: &Problem,
    w: &Weights,
    x0: &[f64],
    horizon: usize,
    warm: &[Vec<Vec<f64>>],
    opts: &OcpOptions,
) -> Result<Trajectory, OcpError> {
    let sh = shooting(p, w, x0, horizon, opts)?;
    let len = horizon * p.m;
    let mut starts: Vec<Vec<f64>> = warm.iter().map(|u| u.concat()).filter(|u| u.len() == len).collect();
    starts.push(vec![0.0; len]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let u: Vec<f64> = (0..len)
            .map(|i| {
                let b = p.input_bounds[i % p.m.max(1)];
                let (lo, hi) = if b.is_bounded() { (b.lo, b.hi) } else { (b.lo.max(-1.0), b.hi.min(1.0)) };
                if lo < hi {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        starts.push(u);
    }
    let runs: Vec<Run> = starts.into_par_iter().filter_map(|u| sh.spg(u, opts).ok()).collect();
    // lowest objective; the earliest start wins ties
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r)
        .ok_or(OcpError::NoFiniteStart)?;
    Ok(sh.trajectory(best)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub mu: f64,
    pub j1: f64,
    pub j2: f64,
    pub converged: bool,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoResult {
    /// Nondominated points sorted by `J1`.
    pub front: Vec<ParetoPoint>,
    /// One solution per grid weight, before filtering.
    pub solutions: Vec<ParetoPoint>,
    /// Grid weights at which the solver failed.
    pub failures: Vec<(f64, String)>,
}

fn scalarised(mu: f64, t: &Trajectory) -> f64 {
    mu * t.j_components[0] + (1.0 - mu) * t.j_components[1]
}

/// Weighted-sum sweep `μ_k = k/(K − 1)` for two costs, warm-starting each
/// solve from the previous one, followed by re-solves from the other grid
/// solutions whenever those score better for a weight.
pub fn pareto_sweep(p: &Problem, x0: &[f64], horizon: usize, k: usize, opts: &OcpOptions) -> Result<ParetoResult, OcpError> {
    let k = k.max(2);
    let grid: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
    let mut sols: Vec<Option<Trajectory>> = Vec::with_capacity(k);
    let mut failures = Vec::new();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    for &mu in &grid {
        let w = Weights::pair(mu)?;
        let warm: Vec<Vec<Vec<f64>>> = prev.iter().cloned().collect();
        match solve_ocp_warm(p, &w, x0, horizon, &warm, opts) {
            Ok(t) => {
                prev = Some(t.u.clone());
                sols.push(Some(t));
            }
            Err(e) => {
                failures.push((mu, e.to_string()));
                sols.push(None);
            }
        }
    }

    let improve_opts = OcpOptions { restarts: 0, ..opts.clone() };
    for _ in 0..3 {
        let snapshot = sols.clone();
        let updates: Vec<Option<Trajectory>> = grid
            .par_iter()
            .enumerate()
            .map(|(i, &mu)| {
                let current = snapshot[i].as_ref()?;
                let own = scalarised(mu, current);
                let better: Vec<Vec<Vec<f64>>> = snapshot
                    .iter()
                    .flatten()
                    .filter(|t| scalarised(mu, t) < own - 1e-12)
                    .map(|t| t.u.clone())
                    .collect();
                if better.is_empty() {
                    return None;
                }
                let w = Weights::pair(mu).ok()?;
                let t = solve_ocp_warm(p, &w, x0, horizon, &better, &improve_opts).ok()?;
                (scalarised(mu, &t) < own).then_some(t)
            })
            .collect();
        let mut changed = false;
        for (slot, upd) in sols.iter_mut().zip(updates) {
            if let Some(t) = upd {
                *slot = Some(t);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let solutions: Vec<ParetoPoint> = grid
        .iter()
        .zip(&sols)
        .filter_map(|(&mu, t)| {
            let t = t.as_ref()?;
            Some(ParetoPoint {
                mu,
                j1: t.j_components[0],
                j2: t.j_components[1],
                converged: t.converged,
                trajectory: t.clone(),
            })
        })
        .collect();
    Ok(ParetoResult {
        front: nondominated(&solutions),
        solutions,
        failures,
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Points not dominated by any other, duplicates removed, sorted by `J1`.
pub fn nondominated(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut out: Vec<ParetoPoint> = Vec::new();
    for (i, a) in points.iter().enumerate() {
        let dominated = points.iter().enumerate().any(|(j, b)| {
            j != i && b.j1 <= a.j1 && b.j2 <= a.j2 && (b.j1 < a.j1 || b.j2 < a.j2) && !(close(a.j1, b.j1) && close(a.j2, b.j2))
        });
        let duplicate = out.iter().any(|o| close(o.j1, a.j1) && close(o.j2, a.j2));
        if !dominated && !duplicate {
            out.push(a.clone());
        }
    }
    out.sort_by(|a, b| a.j1.total_cmp(&b.j1).then(b.j2.total_cmp(&a.j2)));
    out
}
