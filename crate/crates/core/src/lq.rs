//! Linear-quadratic problems: the matrix inequality `Q + P − AᵀPA ≻ 0`,
//! quadratic storage synthesis and linearity of `ν_μ` in `μ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::equilibrium::{lq_scalar_closed_form, EquilibriumError, EquilibriumSolution};
use crate::linalg::{is_symmetric, min_eigenvalue, spectral_radius, sym_eigen};
use crate::model::{LqStructure, Weights};
use crate::storage::{Provenance, StorageFunction};

/// `margin > FEASIBLE_MARGIN` counts as strictly feasible.
pub const FEASIBLE_MARGIN: f64 = 1e-9;
const ASCENT_ITERATIONS: usize = 500;
const ASCENT_STEP: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqError {
    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix inequality infeasible (best margin {0:.3e})")]
    Infeasible(f64),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmiMethod {
    Zero,
    Lyapunov,
    GradientAscent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiSolution {
    pub p: DMatrix<f64>,
    /// `λ_min(Q + P − AᵀPA)`.
    pub margin: f64,
    pub feasible: bool,
    pub psd_p: bool,
    pub method: LmiMethod,
}

/// `λ_min(Q + P − AᵀPA)`.
pub fn lmi_margin(a: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    min_eigenvalue(&(q + p - a.transpose() * p * a))
}

/// Search for a symmetric `P` with `Q + P − AᵀPA ≻ 0`: first `P = 0`, then the
/// Lyapunov series `Σ (Aᵀ)ᵏAᵏ` when `A` is Schur stable, then gradient ascent
/// on the smallest eigenvalue. With `require_psd` a feasible `P` that is only
/// semidefinite is shifted by `εI`.
pub fn solve_lmi(a: &DMatrix<f64>, q: &DMatrix<f64>, require_psd: bool) -> Result<LmiSolution, LqError> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(LqError::Dimension(format!("A is {:?}, Q is {:?}", a.shape(), q.shape())));
    }
    if !is_symmetric(q, 1e-12) {
        return Err(LqError::NotSymmetric("Q"));
    }

    let zero = DMatrix::zeros(n, n);
    let mut best = (zero.clone(), lmi_margin(a, q, &zero), LmiMethod::Zero);

    if best.1 <= FEASIBLE_MARGIN && spectral_radius(a) < 1.0 {
        let mut p = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for _ in 0..100_000 {
            term = a.transpose() * term * a;
            if term.norm() < 1e-14 {
                break;
            }
            p += &term;
        }
        let p = (&p + p.transpose()) * 0.5;
        let m = lmi_margin(a, q, &p);
        if m > best.1 {
            best = (p, m, LmiMethod::Lyapunov);
        }
    }

    if best.1 <= FEASIBLE_MARGIN {
        let mut p = best.0.clone();
        for _ in 0..ASCENT_ITERATIONS {
            let s = q + &p - a.transpose() * &p * a;
            let e = sym_eigen(&s);
            if e.min() > best.1 {
                best = (p.clone(), e.min(), LmiMethod::GradientAscent);
            }
            if e.min() > FEASIBLE_MARGIN {
                break;
            }
            // d λ_min / dP = vvᵀ − A vvᵀ Aᵀ
            let v = e.min_vector();
            let vvt = &v * v.transpose();
            let g = &vvt - a * &vvt * a.transpose();
            p += g * ASCENT_STEP;
        }
    }

    let (mut p, mut margin, method) = best;
    let feasible = margin > FEASIBLE_MARGIN;
    if feasible && require_psd && min_eigenvalue(&p) <= 0.0 {
        let a_norm = a.norm();
        let eps = margin / 2.0 / (1.0 + a_norm * a_norm);
        let shifted = &p + DMatrix::identity(n, n) * eps;
        let m = lmi_margin(a, q, &shifted);
        if m > FEASIBLE_MARGIN {
            p = shifted;
            margin = m;
        }
    }
    let psd_p = n == 0 || min_eigenvalue(&p) > 0.0;
    Ok(LmiSolution {
        p,
        margin,
        feasible,
        psd_p,
        method,
    })
}

/// `μP₁ + (1 − μ)P₂`.
pub fn combine_storage_matrices(p1: &DMatrix<f64>, p2: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    p1 * mu + p2 * (1.0 - mu)
}

/// `Q_μ = Σ μᵢ Qᵢ`.
pub fn weighted_q(lq: &LqStructure, w: &Weights) -> DMatrix<f64> {
    lq.costs
        .iter()
        .zip(w.as_slice())
        .fold(DMatrix::zeros(lq.n(), lq.n()), |acc, (c, mu)| acc + &c.q * *mu)
}

/// Storage `λ(x) = xᵀPx + pᵀx` for `ℓ_μ` with `P` solving the matrix
/// inequality for `Q_μ` and `p = ν − 2P x_e`, so that `∇λ(x_e) = ν`.
pub fn synthesize_quadratic_storage(lq: &LqStructure, w: &Weights, e: &EquilibriumSolution) -> Result<StorageFunction, LqError> {
    synthesize_quadratic_storage_with(lq, w, e, false)
}

pub fn synthesize_quadratic_storage_with(
    lq: &LqStructure,
    w: &Weights,
    e: &EquilibriumSolution,
    require_psd: bool,
) -> Result<StorageFunction, LqError> {
    let sol = solve_lmi(&lq.a, &weighted_q(lq, w), require_psd)?;
    if !sol.feasible {
        return Err(LqError::Infeasible(sol.margin));
    }
    let xe = DVector::from_column_slice(&e.x_e);
    let p = DVector::from_column_slice(&e.nu) - &sol.p * xe * 2.0;
    Ok(StorageFunction::new(sol.p, p, Provenance::LqSynthesized))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuLinearity {
    /// `max |ν_μ − μν₁ − (1 − μ)ν₂|` over the grid.
    pub max_deviation: f64,
    pub argmax_mu: f64,
    pub a_is_one: bool,
    /// `q₁r₂ = q₂r₁`.
    pub ratio_condition: bool,
    /// Either sufficient condition holds.
    pub sufficient: bool,
}

/// Deviation of `ν_μ` from the chord between its endpoint values on a grid of
/// `k` uniform weights, for scalar problems with two costs.
pub fn check_nu_linearity(lq: &LqStructure, k: usize) -> Result<NuLinearity, LqError> {
    if lq.costs.len() != 2 {
        return Err(LqError::Dimension("needs exactly two costs".into()));
    }
    let nu = |mu: f64| -> Result<f64, LqError> {
        let w = Weights::pair(mu).expect("grid weight");
        Ok(lq_scalar_closed_form(lq, &w)?.nu[0])
    };
    let (nu1, nu2) = (nu(1.0)?, nu(0.0)?);
    let k = k.max(2);
    let mut max_deviation = 0.0;
    let mut argmax_mu = 0.0;
    for i in 0..k {
        let mu = i as f64 / (k - 1) as f64;
        let dev = (nu(mu)? - mu * nu1 - (1.0 - mu) * nu2).abs();
        if dev > max_deviation {
            max_deviation = dev;
            argmax_mu = mu;
        }
    }
    let (c1, c2) = (&lq.costs[0], &lq.costs[1]);
    let lhs = c1.q[(0, 0)] * c2.r[(0, 0)];
    let rhs = c2.q[(0, 0)] * c1.r[(0, 0)];
    let a_is_one = lq.a[(0, 0)] == 1.0;
    let ratio_condition = (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
    Ok(NuLinearity {
        max_deviation,
        argmax_mu,
        a_is_one,
        ratio_condition,
        sufficient: a_is_one || ratio_condition,
    })
}
