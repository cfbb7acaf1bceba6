//! Storage functions `λ(x) = xᵀPx + pᵀx`, rotated stage costs and the
//! sampled dissipation inequality.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::equilibrium::EquilibriumSolution;
use crate::expr::{DomainError, Expr, Jet2};
use crate::model::{Interval, Problem, WeightError, Weights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("no admissible sample points")]
    EmptySamples,
    #[error("sampling needs a bounded box")]
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LqSynthesized,
    UserSupplied,
    Combined,
}

fn matrix_rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

fn vector_entries<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

/// `λ(x) = xᵀPx + pᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageFunction {
    #[serde(rename = "P", serialize_with = "matrix_rows")]
    pub quad: DMatrix<f64>,
    #[serde(rename = "p", serialize_with = "vector_entries")]
    pub linear: DVector<f64>,
    pub provenance: Provenance,
}

impl StorageFunction {
    pub fn new(quad: DMatrix<f64>, linear: DVector<f64>, provenance: Provenance) -> Self {
        let quad = (&quad + quad.transpose()) * 0.5;
        StorageFunction {
            quad,
            linear,
            provenance,
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::linear(vec![0.0; n], Provenance::UserSupplied)
    }

    /// `λ(x) = pᵀx`.
    pub fn linear(p: Vec<f64>, provenance: Provenance) -> Self {
        let n = p.len();
        StorageFunction {
            quad: DMatrix::zeros(n, n),
            linear: DVector::from_vec(p),
            provenance,
        }
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        (x.transpose() * &self.quad * &x)[0] + self.linear.dot(&x)
    }

    /// `∇λ(x) = 2Px + p`.
    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        &self.quad * DVector::from_column_slice(x) * 2.0 + &self.linear
    }

    /// `Σ wᵢ λᵢ + cᵀx`.
    pub fn combine(parts: &[(f64, &StorageFunction)], correction: &DVector<f64>) -> StorageFunction {
        let n = correction.len();
        let mut quad = DMatrix::zeros(n, n);
        let mut linear = correction.clone();
        for (w, s) in parts {
            quad += &s.quad * *w;
            linear += &s.linear * *w;
        }
        StorageFunction {
            quad,
            linear,
            provenance: Provenance::Combined,
        }
    }

    /// `λ(y)` as an expression, with `y` given by `args`.
    pub fn compose(&self, args: &[Expr]) -> Expr {
        let n = self.n();
        let mut terms = Vec::new();
        for i in 0..n {
            if self.quad[(i, i)] != 0.0 {
                terms.push(Expr::constant(self.quad[(i, i)]) * args[i].clone() * args[i].clone());
            }
            for j in (i + 1)..n {
                let c = self.quad[(i, j)] + self.quad[(j, i)];
                if c != 0.0 {
                    terms.push(Expr::constant(c) * args[i].clone() * args[j].clone());
                }
            }
            if self.linear[i] != 0.0 {
                terms.push(Expr::constant(self.linear[i]) * args[i].clone());
            }
        }
        terms.into_iter().reduce(|a, b| a + b).unwrap_or(Expr::Const(0.0))
    }

    /// Hessian of `(x, u) ↦ λ(f(x, u))` from the jets of `f`:
    /// `Σⱼ ∂λ/∂yⱼ ∇²fⱼ + J_fᵀ (2P) J_f`.
    pub fn composed_hessian(&self, f: &[Jet2]) -> DMatrix<f64> {
        let d = f.first().map_or(0, Jet2::dim);
        let y: Vec<f64> = f.iter().map(|j| j.value).collect();
        let g = self.gradient(&y);
        let jf = DMatrix::from_fn(f.len(), d, |i, k| f[i].grad[k]);
        let mut h = jf.transpose() * (&self.quad * 2.0) * &jf;
        for (fj, gj) in f.iter().zip(g.iter()) {
            if *gj != 0.0 {
                h += fj.hess() * *gj;
            }
        }
        h
    }

    /// Embed `∇²λ(x) = 2P` into the `(x, u)` Hessian.
    pub fn state_hessian(&self, d: usize) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(d, d);
        h.view_mut((0, 0), (n, n)).copy_from(&(&self.quad * 2.0));
        h
    }

    /// `λ` is bounded below (`P ≻ 0`, or `λ ≡ 0`).
    pub fn bounded_below(&self) -> bool {
        let zero_linear = self.linear.iter().all(|v| *v == 0.0);
        let pd = self.n() > 0 && crate::linalg::min_eigenvalue(&self.quad) > 0.0;
        pd || (zero_linear && crate::linalg::min_eigenvalue(&self.quad) >= 0.0)
    }
}

/// `ℓ̃(x, u) = ℓ(x, u) − ℓ(x_e, u_e) + λ(x) − λ(f(x, u))`.
#[derive(Debug, Clone)]
pub struct RotatedCost {
    pub base: Expr,
    pub equilibrium_value: f64,
    pub storage: StorageFunction,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    expr: Expr,
}

impl RotatedCost {
    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<f64, DomainError> {
        self.expr.eval(x, u)
    }

    pub fn jet2(&self, x: &[f64], u: &[f64]) -> Result<Jet2, DomainError> {
        self.expr.eval_jet2(x, u)
    }
}

/// Rotate `ℓ_μ` with storage `s` around the equilibrium `e`.
pub fn build_rotated_cost(
    p: &Problem,
    w: &Weights,
    s: &StorageFunction,
    e: &EquilibriumSolution,
) -> Result<RotatedCost, StorageError> {
    let base = p.combine_costs(w)?;
    rotate(p, base, s, e)
}

/// As [`build_rotated_cost`] for an explicit base cost.
pub fn rotate(p: &Problem, base: Expr, s: &StorageFunction, e: &EquilibriumSolution) -> Result<RotatedCost, StorageError> {
    let equilibrium_value = base.eval(&e.x_e, &e.u_e)?;
    let states: Vec<Expr> = (0..p.n).map(Expr::state).collect();
    let expr = base.clone() - Expr::constant(equilibrium_value) + s.compose(&states) - s.compose(&p.dynamics);
    Ok(RotatedCost {
        base,
        equilibrium_value,
        storage: s.clone(),
        x_e: e.x_e.clone(),
        u_e: e.u_e.clone(),
        expr,
    })
}

/// Linear correction and the combined storage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correction {
    #[serde(serialize_with = "vector_entries")]
    pub lambda_tilde: DVector<f64>,
    pub combined: StorageFunction,
}

/// `λ̃_μ = ν_μ − Σ μᵢ ∇λᵢ(x_e)` and `λ_μ = Σ μᵢ λᵢ + λ̃_μᵀx`, so that
/// `∇λ_μ(x_e) = ν_μ`.
pub fn build_correction(w: &Weights, storages: &[StorageFunction], e: &EquilibriumSolution) -> Result<Correction, StorageError> {
    if storages.len() != w.len() {
        return Err(WeightError::Length {
            expected: storages.len(),
            got: w.len(),
        }
        .into());
    }
    let mut lambda_tilde = DVector::from_column_slice(&e.nu);
    for (mu, s) in w.as_slice().iter().zip(storages) {
        lambda_tilde -= s.gradient(&e.x_e) * *mu;
    }
    let parts: Vec<(f64, &StorageFunction)> = w.as_slice().iter().copied().zip(storages).collect();
    let combined = StorageFunction::combine(&parts, &lambda_tilde);
    Ok(Correction {
        lambda_tilde,
        combined,
    })
}

/// Points `(x, u)` at which inequalities are checked.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub points: Vec<(Vec<f64>, Vec<f64>)>,
    pub grid_points: usize,
    pub random_points: usize,
}

impl SampleSet {
    /// Uniform grid with `per_dim` points per coordinate (endpoints included)
    /// plus `random` uniform points drawn with `seed`.
    pub fn on_box(n: usize, boxes: &[Interval], per_dim: usize, random: usize, seed: u64) -> Result<Self, StorageError> {
        if !boxes.iter().all(Interval::is_bounded) {
            return Err(StorageError::Unbounded);
        }
        let d = boxes.len();
        let axis = |b: &Interval| -> Vec<f64> {
            if per_dim <= 1 {
                return vec![0.5 * (b.lo + b.hi)];
            }
            (0..per_dim)
                .map(|i| b.lo + (b.hi - b.lo) * i as f64 / (per_dim - 1) as f64)
                .collect()
        };
        let axes: Vec<Vec<f64>> = boxes.iter().map(axis).collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(total + random);
        for mut k in 0..total {
            let mut z = vec![0.0; d];
            for c in (0..d).rev() {
                z[c] = axes[c][k % axes[c].len()];
                k /= axes[c].len();
            }
            let u = z.split_off(n);
            points.push((z, u));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..random {
            let mut z: Vec<f64> = boxes
                .iter()
                .map(|b| if b.lo < b.hi { rng.gen_range(b.lo..=b.hi) } else { b.lo })
                .collect();
            let u = z.split_off(n);
            points.push((z, u));
        }
        Ok(SampleSet {
            points,
            grid_points: total,
            random_points: random,
        })
    }

    /// Samples on the problem's box `𝕐`.
    pub fn on_problem(p: &Problem, per_dim: usize, random: usize, seed: u64) -> Result<Self, StorageError> {
        Self::on_box(p.n, &p.bounds(), per_dim, random, seed)
    }

    /// Samples on the box of half-width `radius` around `(x, u)`, clipped to
    /// the problem's box.
    pub fn around(p: &Problem, x: &[f64], u: &[f64], radius: f64, per_dim: usize, random: usize, seed: u64) -> Self {
        let boxes: Vec<Interval> = x
            .iter()
            .chain(u)
            .zip(p.bounds())
            .map(|(c, b)| Interval::new((c - radius).max(b.lo), (c + radius).min(b.hi)))
            .collect();
        Self::on_box(p.n, &boxes, per_dim, random, seed).expect("finite box")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A sample point together with the value observed there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub value: f64,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationReport {
    /// `inf ℓ̃(x, u) / ‖x − x_e‖²` over the admissible samples.
    pub c_star: f64,
    /// Sample attaining `c_star`.
    pub witness: Witness,
    /// Distance from `(x_e, u_e)` to the nearest admissible sample with
    /// `ℓ̃ ≤ 0`, or `+∞` if there is none.
    pub local_radius: f64,
    pub samples_used: usize,
    pub skipped_domain: usize,
    pub skipped_infeasible: usize,
    pub skipped_near_equilibrium: usize,
}

enum SampleOutcome {
    Domain,
    Infeasible,
    Near { value: f64, dist: f64 },
    Ratio { ratio: f64, value: f64, dist: f64 },
}

/// Check `ℓ̃(x, u) ≥ c*‖x − x_e‖²` on the samples lying in `𝕐` with
/// `f(x, u) ∈ 𝕏`, excluding a `1e-6` ball around `x_e`.
pub fn check_dissipation_inequality(p: &Problem, rc: &RotatedCost, samples: &SampleSet) -> Result<DissipationReport, StorageError> {
    let outcomes: Vec<SampleOutcome> = samples
        .points
        .par_iter()
        .map(|(x, u)| {
            if !p.contains(x, u, 0.0) {
                return SampleOutcome::Infeasible;
            }
            match p.eval_dynamics(x, u) {
                Err(_) => return SampleOutcome::Domain,
                Ok(fx) if !p.state_admissible(&fx, 0.0) => return SampleOutcome::Infeasible,
                Ok(_) => {}
            }
            let Ok(value) = rc.eval(x, u) else {
                return SampleOutcome::Domain;
            };
            let r2: f64 = x.iter().zip(&rc.x_e).map(|(a, b)| (a - b) * (a - b)).sum();
            let dz2: f64 = r2 + u.iter().zip(&rc.u_e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if r2.sqrt() < 1e-6 {
                SampleOutcome::Near { value, dist: dz2.sqrt() }
            } else {
                SampleOutcome::Ratio {
                    ratio: value / r2,
                    value,
                    dist: dz2.sqrt(),
                }
            }
        })
        .collect();

    let mut report = DissipationReport {
        c_star: f64::INFINITY,
        witness: Witness {
            x: Vec::new(),
            u: Vec::new(),
            value: f64::NAN,
            description: String::new(),
            direction: None,
        },
        local_radius: f64::INFINITY,
        samples_used: 0,
        skipped_domain: 0,
        skipped_infeasible: 0,
        skipped_near_equilibrium: 0,
    };
    let mut best = None;
    for (k, o) in outcomes.iter().enumerate() {
        match *o {
            SampleOutcome::Domain => report.skipped_domain += 1,
            SampleOutcome::Infeasible => report.skipped_infeasible += 1,
            SampleOutcome::Near { value, dist } => {
                report.skipped_near_equilibrium += 1;
                if value <= 0.0 && dist > 1e-6 {
                    report.local_radius = report.local_radius.min(dist);
                }
            }
            SampleOutcome::Ratio { ratio, value, dist } => {
                report.samples_used += 1;
                if value <= 0.0 {
                    report.local_radius = report.local_radius.min(dist);
                }
                if ratio < report.c_star {
                    report.c_star = ratio;
                    best = Some((k, value));
                }
            }
        }
    }
    let Some((k, value)) = best else {
        return Err(StorageError::EmptySamples);
    };
    let (x, u) = samples.points[k].clone();
    report.witness = Witness {
        x,
        u,
        value,
        description: "rotated cost at the sample minimising the quadratic margin".into(),
        direction: None,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_kkt, Guess};
    use crate::model::load_problem;
    use approx::assert_abs_diff_eq;

    const EX47: &str = "[dims] n=1 m=1\n[dynamics]\nf1 = 2*x1 - x1^2 + u1 + u1^2 + u1^3\n\
                        [cost 1]\nl = 2*x1^2 + 0.0001*u1^2\n[cost 2]\nl = 2*x1^2 + 0.9999*u1^2 + 2*u1\n";

    fn ex47_half() -> (Problem, Weights, EquilibriumSolution) {
        let p = load_problem(EX47).unwrap();
        let w = Weights::pair(0.5).unwrap();
        let e = solve_kkt(&p, &w, &Guess::new(vec![0.2], vec![-0.2], vec![1.0])).unwrap();
        (p, w, e)
    }

    #[test]
    fn rotated_cost_vanishes_with_gradient_at_equilibrium() {
        let (p, w, e) = ex47_half();
        let s = StorageFunction::linear(e.nu.clone(), Provenance::UserSupplied);
        let rc = build_rotated_cost(&p, &w, &s, &e).unwrap();
        let j = rc.jet2(&e.x_e, &e.u_e).unwrap();
        assert!(j.value.abs() <= 1e-9);
        assert!(j.grad.iter().all(|g| g.abs() <= 1e-8));
        // 1 - nu * (2 + 6 u_e)
        let expected = 1.0 - e.nu[0] * (2.0 + 6.0 * e.u_e[0]);
        assert_abs_diff_eq!(j.hess_entry(1, 1), expected, epsilon = 1e-12);
    }

    #[test]
    fn composed_hessian_matches_expression() {
        let (p, _, e) = ex47_half();
        let s = StorageFunction::new(
            DMatrix::from_element(1, 1, 0.7),
            DVector::from_element(1, -0.4),
            Provenance::UserSupplied,
        );
        let (x, u) = ([0.3], [-0.8]);
        let direct = s.compose(&p.dynamics).eval_jet2(&x, &u).unwrap().hess();
        let fj = p.dynamics_jet2(&x, &u).unwrap();
        assert!((s.composed_hessian(&fj) - direct).amax() <= 1e-12);
        assert_abs_diff_eq!(s.compose(&[Expr::state(0)]).eval(&x, &u).unwrap(), s.eval(&x), epsilon = 1e-15);
        let _ = e;
    }

    #[test]
    fn correction_recovers_multiplier() {
        let (p, w, e) = ex47_half();
        let l1 = StorageFunction::zero(1);
        let l2 = StorageFunction::linear(vec![2.1986096], Provenance::UserSupplied);
        let c = build_correction(&w, &[l1, l2], &e).unwrap();
        assert_abs_diff_eq!(c.combined.linear[0], 1.111667, epsilon = 1e-5);
        assert!((c.combined.gradient(&e.x_e)[0] - e.nu[0]).abs() <= 1e-12);
        let _ = p;
    }

    #[test]
    fn zero_storage_quadratic_margin() {
        let p = load_problem(
            "[dims] n=1 m=1\n[dynamics]\nf1 = 0.5*x1 + u1\n[cost 1]\nl = 3*x1^2 + 2*u1^2\n[cost 2]\nl = x1^2 + u1^2\n",
        )
        .unwrap();
        let w = Weights::pair(1.0).unwrap();
        let e = solve_kkt(&p, &w, &Guess::new(vec![0.3], vec![0.1], vec![0.0])).unwrap();
        let rc = build_rotated_cost(&p, &w, &StorageFunction::zero(1), &e).unwrap();
        let samples = SampleSet::around(&p, &e.x_e, &e.u_e, 2.0, 41, 100, 0);
        let r = check_dissipation_inequality(&p, &rc, &samples).unwrap();
        // minimum of (3x² + 2u²)/x² is 3 at u = 0
        assert_abs_diff_eq!(r.c_star, 3.0, epsilon = 1e-12);
        assert!(r.local_radius.is_infinite());
    }

    #[test]
    fn forced_linear_storage_violates_inequality() {
        let (p, w, e) = ex47_half();
        let s = StorageFunction::linear(e.nu.clone(), Provenance::UserSupplied);
        let rc = build_rotated_cost(&p, &w, &s, &e).unwrap();
        let samples = SampleSet::around(&p, &e.x_e, &e.u_e, 0.5, 101, 500, 0);
        let r = check_dissipation_inequality(&p, &rc, &samples).unwrap();
        assert!(r.c_star < 0.0);
        assert!(r.local_radius < 0.5);
        assert_abs_diff_eq!(rc.eval(&r.witness.x, &r.witness.u).unwrap(), r.witness.value, epsilon = 1e-10);
    }

    #[test]
    fn empty_samples_error() {
        let (p, w, e) = ex47_half();
        let rc = build_rotated_cost(&p, &w, &StorageFunction::zero(1), &e).unwrap();
        let samples = SampleSet {
            points: vec![(e.x_e.clone(), e.u_e.clone())],
            grid_points: 1,
            random_points: 0,
        };
        assert_eq!(
            check_dissipation_inequality(&p, &rc, &samples).unwrap_err(),
            StorageError::EmptySamples
        );
    }

    #[test]
    fn grid_layout() {
        let b = [Interval::new(0.0, 1.0), Interval::new(-1.0, 1.0)];
        let s = SampleSet::on_box(1, &b, 3, 5, 1).unwrap();
        assert_eq!(s.len(), 14);
        assert_eq!(s.points[0], (vec![0.0], vec![-1.0]));
        assert_eq!(s.points[1], (vec![0.0], vec![0.0]));
        assert_eq!(s.points[8], (vec![1.0], vec![1.0]));
        assert!(SampleSet::on_box(1, &[Interval::FREE, b[0]], 3, 0, 0).is_err());
    }
}
