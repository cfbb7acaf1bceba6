//! Optimal equilibria: minimise `ℓ_μ(x, u)` subject to `x = f(x, u)` by Newton's
//! method on the KKT system of `L(x, u, ν) = ℓ_μ(x, u) + νᵀ(x − f(x, u))`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{DomainError, Expr};
use crate::linalg::{min_eigenvalue, null_space, singular_values, sym_eigen};
use crate::model::{LqStructure, Problem, WeightError, Weights};

pub const KKT_TOL: f64 = 1e-10;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const MAX_HALVINGS: usize = 30;
/// Minimum constraint slack for an equilibrium to count as interior.
pub const INTERIOR_SLACK: f64 = 1e-9;
/// Candidates whose costs differ by at most this much are tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("Newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("singular KKT matrix at iteration {iteration} (condition estimate {condition:.3e})")]
    Singular { iteration: usize, condition: f64 },
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("no multistart point converged ({starts} starts)")]
    NoConvergence { starts: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("closed form needs n = m = 1")]
    NotScalar,
    #[error("zero denominator q_mu*b^2 + (1-a)^2*r_mu")]
    ZeroDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumSolution {
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    pub nu: Vec<f64>,
    pub kkt_residual: f64,
    pub cost_value: f64,
    pub regular: bool,
    pub sosc: bool,
    pub interior: bool,
}

impl EquilibriumSolution {
    pub fn guess(&self) -> Guess {
        Guess {
            x: self.x_e.clone(),
            u: self.u_e.clone(),
            nu: self.nu.clone(),
        }
    }

    /// `‖x_e − f(x_e, u_e)‖∞`.
    pub fn equilibrium_residual(&self, p: &Problem) -> Result<f64, DomainError> {
        let fx = p.eval_dynamics(&self.x_e, &self.u_e)?;
        Ok(self
            .x_e
            .iter()
            .zip(&fx)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Starting point `(x, u, ν)` for Newton.
#[derive(Debug, Clone, PartialEq)]
pub struct Guess {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub nu: Vec<f64>,
}

impl Guess {
    pub fn new(x: Vec<f64>, u: Vec<f64>, nu: Vec<f64>) -> Self {
        Guess { x, u, nu }
    }

    fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len() + self.u.len() + self.nu.len(),
            self.x.iter().chain(&self.u).chain(&self.nu).copied(),
        )
    }
}

struct Kkt<'a> {
    p: &'a Problem,
    cost: Expr,
}

impl<'a> Kkt<'a> {
    fn split<'z>(&self, z: &'z DVector<f64>) -> (&'z [f64], &'z [f64], &'z [f64]) {
        let (n, m) = (self.p.n, self.p.m);
        let s = z.as_slice();
        (&s[..n], &s[n..n + m], &s[n + m..])
    }

    /// Residual and, if requested, the KKT matrix at `z = (x, u, ν)`.
    fn eval(&self, z: &DVector<f64>, with_matrix: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>), DomainError> {
        let (n, d) = (self.p.n, self.p.dim());
        let (x, u, nu) = self.split(z);
        let l = self.cost.eval_jet2(x, u)?;
        let fs = self.p.dynamics_jet2(x, u)?;

        // ∇h = [I 0] − ∇f for h = x − f
        let mut jh = DMatrix::zeros(n, d);
        for (i, fi) in fs.iter().enumerate() {
            for k in 0..d {
                jh[(i, k)] = -fi.grad[k];
            }
            jh[(i, i)] += 1.0;
        }
        let grad_l = l.grad_vector() + jh.transpose() * DVector::from_column_slice(nu);
        let mut r = DVector::zeros(d + n);
        r.rows_mut(0, d).copy_from(&grad_l);
        for i in 0..n {
            r[d + i] = x[i] - fs[i].value;
        }
        if !with_matrix {
            return Ok((r, None));
        }

        let mut hl = l.hess();
        for (fi, &v) in fs.iter().zip(nu) {
            hl -= fi.hess() * v;
        }
        let mut k = DMatrix::zeros(d + n, d + n);
        k.view_mut((0, 0), (d, d)).copy_from(&hl);
        k.view_mut((0, d), (d, n)).copy_from(&jh.transpose());
        k.view_mut((d, 0), (n, d)).copy_from(&jh);
        Ok((r, Some(k)))
    }

    fn residual_norm(&self, z: &DVector<f64>) -> Result<f64, DomainError> {
        Ok(self.eval(z, false)?.0.amax())
    }
}

fn condition_estimate(k: &DMatrix<f64>) -> f64 {
    let e = sym_eigen(k);
    let abs: Vec<f64> = e.values.iter().map(|v| v.abs()).collect();
    let hi = abs.iter().copied().fold(0.0, f64::max);
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Newton's method on the KKT system of the optimal equilibrium problem for
/// `ℓ_μ`, started from `guess`.
pub fn solve_kkt(p: &Problem, w: &Weights, guess: &Guess) -> Result<EquilibriumSolution, EquilibriumError> {
    let cost = p.combine_costs(w)?;
    solve_kkt_for(p, &cost, guess)
}

/// As [`solve_kkt`] for an explicitly given cost expression.
pub fn solve_kkt_for(p: &Problem, cost: &Expr, guess: &Guess) -> Result<EquilibriumSolution, EquilibriumError> {
    let kkt = Kkt { p, cost: cost.clone() };
    let mut z = guess.stacked();
    assert_eq!(z.len(), p.dim() + p.n, "guess has wrong dimensions");

    let mut iterations = 0;
    let (mut r, mut k) = {
        let (r, k) = kkt.eval(&z, true)?;
        (r, k.expect("matrix requested"))
    };
    loop {
        let norm = r.amax();
        if norm <= KKT_TOL {
            break;
        }
        if iterations == MAX_NEWTON_ITERATIONS {
            return Err(EquilibriumError::Diverged {
                iterations,
                residual: norm,
            });
        }
        iterations += 1;
        let step = k.clone().lu().solve(&(-&r)).filter(|s| s.iter().all(|v| v.is_finite()));
        let Some(step) = step else {
            return Err(EquilibriumError::Singular {
                iteration: iterations,
                condition: condition_estimate(&k),
            });
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &z + &step * alpha;
            if let Ok(tn) = kkt.residual_norm(&trial) {
                if tn < norm || tn <= KKT_TOL {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(EquilibriumError::Diverged {
                iterations,
                residual: norm,
            });
        };
        z = next;
        let (nr, nk) = kkt.eval(&z, true)?;
        r = nr;
        k = nk.expect("matrix requested");
    }

    let (x, u, nu) = kkt.split(&z);
    let mut sol = EquilibriumSolution {
        x_e: x.to_vec(),
        u_e: u.to_vec(),
        nu: nu.to_vec(),
        kkt_residual: r.amax(),
        cost_value: cost.eval(x, u)?,
        regular: false,
        sosc: false,
        interior: p.slack(x, u) > INTERIOR_SLACK,
    };
    let so = second_order_for(p, cost, &sol)?;
    sol.regular = so.regular;
    sol.sosc = so.sosc;
    Ok(sol)
}

/// Regularity and strong second-order sufficiency at a KKT point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondOrder {
    pub regular: bool,
    pub sosc: bool,
    /// Smallest and largest singular value of `∇h`.
    pub singular_min: f64,
    pub singular_max: f64,
    /// Smallest eigenvalue of the Lagrangian Hessian projected onto the null
    /// space of `∇h` (`+∞` if the null space is trivial).
    pub projected_min_eigenvalue: f64,
}

/// `regular` iff `∇h(x_e, u_e)` has full row rank `n`; `sosc` iff the
/// Lagrangian Hessian is positive definite on the null space of `∇h`.
pub fn check_second_order(p: &Problem, w: &Weights, e: &EquilibriumSolution) -> Result<SecondOrder, EquilibriumError> {
    let cost = p.combine_costs(w)?;
    second_order_for(p, &cost, e)
}

fn second_order_for(p: &Problem, cost: &Expr, e: &EquilibriumSolution) -> Result<SecondOrder, EquilibriumError> {
    let kkt = Kkt { p, cost: cost.clone() };
    let z = e.guess().stacked();
    let (_, k) = kkt.eval(&z, true)?;
    let k = k.expect("matrix requested");
    let (n, d) = (p.n, p.dim());
    let jh = k.view((d, 0), (n, d)).into_owned();
    let hl = k.view((0, 0), (d, d)).into_owned();

    let sv = singular_values(&jh);
    let singular_max = sv.first().copied().unwrap_or(0.0);
    let singular_min = sv.last().copied().unwrap_or(0.0);
    let regular = sv.len() == n && singular_max > 0.0 && singular_min > 1e-8 * singular_max;

    let z = null_space(&jh, 1e-8);
    let projected_min_eigenvalue = if z.ncols() == 0 {
        f64::INFINITY
    } else {
        min_eigenvalue(&(z.transpose() * &hl * &z))
    };
    Ok(SecondOrder {
        regular,
        sosc: projected_min_eigenvalue > 1e-9,
        singular_min,
        singular_max,
        projected_min_eigenvalue,
    })
}

/// Multistart settings for [`find_global_equilibrium`].
#[derive(Debug, Clone)]
pub struct Multistart {
    /// Grid points per coordinate of `(x, u)`.
    pub points_per_dim: usize,
    /// Half-width of the start box on coordinates without finite bounds.
    pub free_half_width: f64,
    /// Extra starts tried before the grid, e.g. the previous sweep solution.
    pub warm: Vec<Guess>,
}

impl Default for Multistart {
    fn default() -> Self {
        Multistart {
            points_per_dim: 5,
            free_half_width: 5.0,
            warm: Vec::new(),
        }
    }
}

impl Multistart {
    pub fn with_warm(mut self, g: Guess) -> Self {
        self.warm.push(g);
        self
    }

    /// Starting points: warm starts, then a tensor grid of cell centres over
    /// the box with `ν₀ = 0`.
    pub fn starts(&self, p: &Problem) -> Vec<Guess> {
        let k = self.points_per_dim.max(1);
        let axes: Vec<Vec<f64>> = p
            .bounds()
            .iter()
            .map(|b| {
                let h = self.free_half_width;
                let (lo, hi) = match (b.lo.is_finite(), b.hi.is_finite()) {
                    (true, true) => (b.lo, b.hi),
                    (true, false) => (b.lo, b.lo + 2.0 * h),
                    (false, true) => (b.hi - 2.0 * h, b.hi),
                    (false, false) => (-h, h),
                };
                (0..k).map(|i| lo + (i as f64 + 0.5) / k as f64 * (hi - lo)).collect()
            })
            .collect();

        let mut out = self.warm.clone();
        let d = axes.len();
        let mut idx = vec![0usize; d];
        loop {
            let pt: Vec<f64> = (0..d).map(|c| axes[c][idx[c]]).collect();
            out.push(Guess::new(pt[..p.n].to_vec(), pt[p.n..].to_vec(), vec![0.0; p.n]));
            let mut c = d;
            loop {
                if c == 0 {
                    return out;
                }
                c -= 1;
                idx[c] += 1;
                if idx[c] < k {
                    break;
                }
                idx[c] = 0;
            }
        }
    }
}

/// Result of a multistart search.
#[derive(Debug, Clone, Serialize)]
pub struct GlobalEquilibrium {
    pub best: EquilibriumSolution,
    /// Other distinct admissible KKT points whose cost is within
    /// [`TIE_TOL`] of the best.
    pub ties: Vec<EquilibriumSolution>,
    /// All distinct admissible KKT points, best first.
    pub candidates: Vec<EquilibriumSolution>,
    pub starts: usize,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn same_point(a: &EquilibriumSolution, b: &EquilibriumSolution) -> bool {
    a.x_e
        .iter()
        .chain(&a.u_e)
        .zip(b.x_e.iter().chain(&b.u_e))
        .all(|(p, q)| (p - q).abs() <= 1e-6 * (1.0 + p.abs()))
}

/// Order candidates by cost, with near-ties broken by the lexicographically
/// smallest `x_e` (then `u_e`).
pub fn rank_candidates(mut sols: Vec<EquilibriumSolution>) -> Vec<EquilibriumSolution> {
    let best = sols.iter().map(|s| s.cost_value).fold(f64::INFINITY, f64::min);
    sols.sort_by(|a, b| {
        let ta = a.cost_value - best <= TIE_TOL;
        let tb = b.cost_value - best <= TIE_TOL;
        match (ta, tb) {
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            (true, true) => lex_cmp(&a.x_e, &b.x_e).then_with(|| lex_cmp(&a.u_e, &b.u_e)),
            (false, false) => a.cost_value.total_cmp(&b.cost_value),
        }
    });
    let mut out: Vec<EquilibriumSolution> = Vec::new();
    for s in sols {
        if !out.iter().any(|o| same_point(o, &s)) {
            out.push(s);
        }
    }
    out
}

/// Globally optimal equilibrium among all KKT points reached from the
/// multistart set. Points that leave the expression domain or `𝕐` are
/// discarded.
pub fn find_global_equilibrium(p: &Problem, w: &Weights, cfg: &Multistart) -> Result<GlobalEquilibrium, EquilibriumError> {
    let cost = p.combine_costs(w)?;
    let starts = cfg.starts(p);
    let sols: Vec<EquilibriumSolution> = starts
        .par_iter()
        .filter_map(|g| solve_kkt_for(p, &cost, g).ok())
        .filter(|s| p.contains(&s.x_e, &s.u_e, INTERIOR_SLACK))
        .collect();
    if sols.is_empty() {
        return Err(EquilibriumError::NoConvergence { starts: starts.len() });
    }
    let candidates = rank_candidates(sols);
    let best = candidates[0].clone();
    let ties = candidates[1..]
        .iter()
        .filter(|s| s.cost_value - best.cost_value <= TIE_TOL)
        .cloned()
        .collect();
    Ok(GlobalEquilibrium {
        best,
        ties,
        candidates,
        starts: starts.len(),
    })
}

/// Closed-form optimal equilibrium of a scalar LQ problem
/// `x⁺ = ax + bu`, `ℓ_μ = q x² + r u² + s x + v u` with weighted data.
pub fn lq_scalar_closed_form(lq: &LqStructure, w: &Weights) -> Result<EquilibriumSolution, EquilibriumError> {
    if !lq.is_scalar() {
        return Err(EquilibriumError::NotScalar);
    }
    if w.len() != lq.costs.len() {
        return Err(WeightError::Length {
            expected: lq.costs.len(),
            got: w.len(),
        }
        .into());
    }
    let (a, b) = (lq.a[(0, 0)], lq.b[(0, 0)]);
    let mix = |get: &dyn Fn(usize) -> f64| w.as_slice().iter().enumerate().map(|(i, mu)| mu * get(i)).sum::<f64>();
    let q = mix(&|i| lq.costs[i].q[(0, 0)]);
    let r = mix(&|i| lq.costs[i].r[(0, 0)]);
    let s = mix(&|i| lq.costs[i].s[0]);
    let v = mix(&|i| lq.costs[i].v[0]);
    let offset = mix(&|i| lq.costs[i].offset);

    let c = 1.0 - a;
    let den = q * b * b + r * c * c;
    if den == 0.0 {
        return Err(EquilibriumError::ZeroDenominator);
    }
    let t = s * b + c * v;
    let x = -b * t / (2.0 * den);
    let u = -c * t / (2.0 * den);
    let nu = (b * (2.0 * r * u + v) - c * (2.0 * q * x + s)) / (b * b + c * c);

    let residual = [2.0 * q * x + s + nu * c, 2.0 * r * u + v - nu * b, c * x - b * u]
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(EquilibriumSolution {
        x_e: vec![x],
        u_e: vec![u],
        nu: vec![nu],
        kkt_residual: residual,
        cost_value: q * x * x + r * u * u + s * x + v * u + offset,
        regular: true,
        sosc: den > 0.0,
        interior: true,
    })
}
