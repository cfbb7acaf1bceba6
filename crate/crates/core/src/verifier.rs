//! Certificates of strict dissipativity for `ℓ_μ = Σ μᵢ ℓᵢ`.
//!
//! The single-cost storages `λᵢ` come from the linear-quadratic synthesis when
//! the problem is LQ and are otherwise linear with slope `νᵢ`, the multiplier
//! at the optimal equilibrium of `ℓᵢ`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::equilibrium::{
    find_global_equilibrium, solve_kkt_for, EquilibriumError, EquilibriumSolution, GlobalEquilibrium, Guess, Multistart,
};
use crate::expr::{Expr, Jet2};
use crate::linalg::{max_eigenvalue, min_eigenvalue, sym_eigen};
use crate::lq::synthesize_quadratic_storage;
use crate::model::{LqStructure, Problem, WeightError, Weights};
use crate::storage::{
    build_correction, check_dissipation_inequality, rotate, DissipationReport, Provenance, SampleSet, StorageError,
    StorageFunction, Witness,
};

/// Strictness threshold for convexity and for `m₂ > m₁`.
pub const STRICTNESS: f64 = 1e-8;
/// Tolerance on the smallest Hessian eigenvalue before refuting.
pub const REFUTE_TOL: f64 = 1e-8;
/// Equilibria closer than this count as shared.
pub const SHARED_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("global sampling needs a bounded constraint box")]
    Unbounded,
    #[error("no equilibrium strictly inside the constraints (Slater point search failed)")]
    NoSlaterPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    CertifiedLocal,
    CertifiedGlobalSampled,
    CertifiedConvex,
    CertifiedSharedEquilibrium,
    Refuted,
    Inconclusive,
}

impl Status {
    pub fn is_certified(self) -> bool {
        !matches!(self, Status::Refuted | Status::Inconclusive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Convex,
    ConvexLowerBound,
    SharedEquilibrium,
    Local,
    GlobalSampled,
    ContinuityScan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleCounts {
    pub grid: usize,
    pub random: usize,
    pub used: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub status: Status,
    pub method: Method,
    pub mu: Weights,
    pub equilibrium: Option<EquilibriumSolution>,
    pub storage: Option<StorageFunction>,
    pub lambda_tilde: Option<Vec<f64>>,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub alpha_coefficient: Option<f64>,
    /// Radius of the largest sampled ball around the equilibrium on which the
    /// rotated cost stays positive.
    pub local_radius: Option<f64>,
    /// Hessian of the rotated cost at the equilibrium, row by row.
    pub hessian: Option<Vec<Vec<f64>>>,
    /// The Hessian test also gives strict `(x, u)`-dissipativity.
    pub xu_dissipative: bool,
    /// The storage is not bounded below on an unbounded `𝕏`.
    pub pre_dissipative_only: bool,
    pub witnesses: Vec<Witness>,
    pub samples: Option<SampleCounts>,
    pub reason: String,
    pub note: Option<String>,
}

impl Certificate {
    fn new(status: Status, method: Method, mu: &Weights, reason: impl Into<String>) -> Self {
        Certificate {
            status,
            method,
            mu: mu.clone(),
            equilibrium: None,
            storage: None,
            lambda_tilde: None,
            m1: None,
            m2: None,
            alpha_coefficient: None,
            local_radius: None,
            hessian: None,
            xu_dissipative: false,
            pre_dissipative_only: false,
            witnesses: Vec::new(),
            samples: None,
            reason: reason.into(),
            note: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Sampling densities.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    pub per_dim: usize,
    pub random: usize,
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub multistart: Multistart,
    /// Samples on `𝕐` for the global Hessian test and dissipation margins.
    pub global: Sampling,
    /// Samples on a box around the equilibrium for local margins.
    pub local: Sampling,
    pub local_radius: f64,
    /// Samples for the convexity checks.
    pub convex: Sampling,
    /// Half-width of the sampling box on unbounded coordinates.
    pub free_half_width: f64,
    pub seed: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            multistart: Multistart::default(),
            global: Sampling {
                per_dim: 200,
                random: 1000,
            },
            local: Sampling {
                per_dim: 41,
                random: 200,
            },
            local_radius: 0.25,
            convex: Sampling {
                per_dim: 21,
                random: 200,
            },
            free_half_width: 10.0,
            seed: 0,
        }
    }
}

/// Per-sample derivative data reused across weights.
struct HessianSample {
    x: Vec<f64>,
    u: Vec<f64>,
    cost_hess: Vec<DMatrix<f64>>,
    f: Vec<Jet2>,
}

struct HessianSamples {
    points: Vec<HessianSample>,
    grid: usize,
    random: usize,
    skipped: usize,
}

/// Analysis context: the problem, its single-cost optimal equilibria and
/// storages.
pub struct Verifier<'a> {
    p: &'a Problem,
    cfg: VerifierConfig,
    lq: Option<LqStructure>,
    endpoints: Vec<EquilibriumSolution>,
    storages: Vec<StorageFunction>,
    global_samples: OnceLock<Result<HessianSamples, VerifierError>>,
}

impl<'a> Verifier<'a> {
    /// Solve each single-cost equilibrium problem and derive its storage.
    pub fn new(p: &'a Problem, cfg: VerifierConfig) -> Result<Self, VerifierError> {
        let k = p.num_costs();
        let lq = p.extract_lq().ok();
        let mut endpoints = Vec::with_capacity(k);
        let mut storages = Vec::with_capacity(k);
        for i in 0..k {
            let w = Weights::unit(i, k);
            let e = find_global_equilibrium(p, &w, &cfg.multistart)?.best;
            let synthesized = lq.as_ref().and_then(|lq| synthesize_quadratic_storage(lq, &w, &e).ok());
            storages.push(synthesized.unwrap_or_else(|| StorageFunction::linear(e.nu.clone(), Provenance::UserSupplied)));
            endpoints.push(e);
        }
        Ok(Self::with_storages(p, cfg, endpoints, storages))
    }

    /// Use given single-cost equilibria and storages.
    pub fn with_storages(
        p: &'a Problem,
        cfg: VerifierConfig,
        endpoints: Vec<EquilibriumSolution>,
        storages: Vec<StorageFunction>,
    ) -> Self {
        Verifier {
            p,
            lq: p.extract_lq().ok(),
            cfg,
            endpoints,
            storages,
            global_samples: OnceLock::new(),
        }
    }

    /// Linear-quadratic structure, if the problem has one.
    pub fn lq(&self) -> Option<&LqStructure> {
        self.lq.as_ref()
    }

    pub fn problem(&self) -> &Problem {
        self.p
    }

    pub fn endpoints(&self) -> &[EquilibriumSolution] {
        &self.endpoints
    }

    pub fn storages(&self) -> &[StorageFunction] {
        &self.storages
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.cfg
    }

    /// Optimal equilibrium for `w`, warm-started from the single-cost
    /// equilibria and `warm`.
    pub fn equilibrium(&self, w: &Weights, warm: &[Guess]) -> Result<GlobalEquilibrium, VerifierError> {
        let mut ms = self.cfg.multistart.clone();
        ms.warm.extend(warm.iter().cloned());
        ms.warm.extend(self.endpoints.iter().map(EquilibriumSolution::guess));
        Ok(find_global_equilibrium(self.p, w, &ms)?)
    }

    fn pre_dissipative_only(&self, s: &StorageFunction) -> bool {
        !self.p.is_bounded() && !s.bounded_below()
    }

    /// Hessian of `Σ μᵢ ℓ̃ᵢ` from precomputed cost Hessians and dynamics jets.
    fn rotated_hessian(&self, w: &Weights, cost_hess: &[DMatrix<f64>], f: &[Jet2]) -> DMatrix<f64> {
        let d = self.p.dim();
        let mut h = DMatrix::zeros(d, d);
        for ((mu, hl), s) in w.as_slice().iter().zip(cost_hess).zip(&self.storages) {
            if *mu == 0.0 {
                continue;
            }
            h += (hl + s.state_hessian(d) - s.composed_hessian(f)) * *mu;
        }
        h
    }

    /// `∇²(λ̃ᵀf)`.
    fn correction_hessian(lambda_tilde: &DVector<f64>, f: &[Jet2]) -> DMatrix<f64> {
        let d = f.first().map_or(0, Jet2::dim);
        f.iter()
            .zip(lambda_tilde.iter())
            .fold(DMatrix::zeros(d, d), |acc, (fj, c)| acc + fj.hess() * *c)
    }

    fn cost_hessians(&self, w: &Weights, x: &[f64], u: &[f64]) -> Result<Vec<DMatrix<f64>>, VerifierError> {
        let d = self.p.dim();
        self.p
            .costs
            .iter()
            .zip(w.as_slice())
            .map(|(l, mu)| {
                if *mu == 0.0 {
                    Ok(DMatrix::zeros(d, d))
                } else {
                    Ok(l.eval_jet2(x, u).map_err(StorageError::from)?.hess())
                }
            })
            .collect()
    }

    fn local_samples(&self, e: &EquilibriumSolution) -> SampleSet {
        let s = self.cfg.local;
        SampleSet::around(self.p, &e.x_e, &e.u_e, self.cfg.local_radius, s.per_dim, s.random, self.cfg.seed)
    }

    /// Samples on `𝕐`, or on a box around `center` when `𝕐` is unbounded.
    fn region_samples(&self, s: Sampling, center: &EquilibriumSolution) -> SampleSet {
        SampleSet::on_problem(self.p, s.per_dim, s.random, self.cfg.seed).unwrap_or_else(|_| {
            SampleSet::around(
                self.p,
                &center.x_e,
                &center.u_e,
                self.cfg.free_half_width,
                s.per_dim,
                s.random,
                self.cfg.seed,
            )
        })
    }

    fn margin(
        &self,
        base: Expr,
        s: &StorageFunction,
        e: &EquilibriumSolution,
        samples: &SampleSet,
    ) -> Result<DissipationReport, VerifierError> {
        let rc = rotate(self.p, base, s, e)?;
        Ok(check_dissipation_inequality(self.p, &rc, samples)?)
    }

    /// Local test at the equilibrium: `m₂ = λ_min(∇²Σμᵢℓ̃ᵢ)`,
    /// `m₁ = max(0, λ_max(∇²(λ̃ᵀf)))`; refuted when the linearly corrected
    /// rotated cost has negative curvature.
    pub fn certify_local(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        let g = self.equilibrium(w, &[])?;
        self.local_at(w, &g.best, true)
    }

    fn local_at(&self, w: &Weights, e: &EquilibriumSolution, with_margin: bool) -> Result<Certificate, VerifierError> {
        let mut cert = Certificate::new(Status::Inconclusive, Method::Local, w, "");
        cert.equilibrium = Some(e.clone());
        if !e.interior {
            cert.reason = "optimal equilibrium is not in the interior of the constraints".into();
            return Ok(cert);
        }
        if !e.regular {
            cert.reason = "equilibrium constraint is not regular".into();
            return Ok(cert);
        }
        let corr = build_correction(w, &self.storages, e)?;
        let f = self.p.dynamics_jet2(&e.x_e, &e.u_e).map_err(StorageError::from)?;
        let h2 = self.rotated_hessian(w, &self.cost_hessians(w, &e.x_e, &e.u_e)?, &f);
        let h1 = Self::correction_hessian(&corr.lambda_tilde, &f);
        let m2 = min_eigenvalue(&h2);
        let m1 = max_eigenvalue(&h1).max(0.0);
        let h = &h2 - &h1;
        let eig = sym_eigen(&h);

        cert.m1 = Some(m1);
        cert.m2 = Some(m2);
        cert.hessian = Some(rows(&h));
        cert.lambda_tilde = Some(corr.lambda_tilde.iter().copied().collect());
        cert.pre_dissipative_only = self.pre_dissipative_only(&corr.combined);
        cert.storage = Some(corr.combined.clone());

        if eig.min() < -REFUTE_TOL {
            cert.status = Status::Refuted;
            cert.reason = format!(
                "rotated cost with the linearly corrected storage has Hessian eigenvalue {:.6e} < 0 at the equilibrium",
                eig.min()
            );
            cert.witnesses.push(Witness {
                x: e.x_e.clone(),
                u: e.u_e.clone(),
                value: eig.min(),
                description: "smallest eigenvalue of the rotated-cost Hessian at the equilibrium".into(),
                direction: Some(eig.min_vector().iter().copied().collect()),
            });
            return Ok(cert);
        }
        if m2 > 0.0 && m2 - m1 > STRICTNESS {
            cert.status = Status::CertifiedLocal;
            cert.xu_dissipative = true;
            cert.reason = format!("m2 = {m2:.6e} > m1 = {m1:.6e}");
            if with_margin {
                let base = self.p.combine_costs(w)?;
                let samples = self.local_samples(e);
                if let Ok(r) = self.margin(base, &corr.combined, e, &samples) {
                    cert.alpha_coefficient = Some(r.c_star);
                    cert.local_radius = Some(r.local_radius);
                    cert.samples = Some(SampleCounts {
                        grid: samples.grid_points,
                        random: samples.random_points,
                        used: r.samples_used,
                        skipped: r.skipped_domain + r.skipped_infeasible + r.skipped_near_equilibrium,
                    });
                }
            }
        } else {
            cert.reason = format!("m2 = {m2:.6e} does not exceed m1 = {m1:.6e}");
        }
        Ok(cert)
    }

    fn hessian_samples(&self) -> Result<&HessianSamples, VerifierError> {
        self.global_samples
            .get_or_init(|| {
                let s = self.cfg.global;
                let set = SampleSet::on_problem(self.p, s.per_dim, s.random, self.cfg.seed)
                    .map_err(|_| VerifierError::Unbounded)?;
                let all = Weights::new(vec![1.0 / self.p.num_costs() as f64; self.p.num_costs()]).ok();
                let evaluated: Vec<Option<HessianSample>> = set
                    .points
                    .par_iter()
                    .map(|(x, u)| {
                        if !self.p.contains(x, u, 0.0) {
                            return None;
                        }
                        let w = all.as_ref()?;
                        let cost_hess = self.cost_hessians(w, x, u).ok()?;
                        let f = self.p.dynamics_jet2(x, u).ok()?;
                        Some(HessianSample {
                            x: x.clone(),
                            u: u.clone(),
                            cost_hess,
                            f,
                        })
                    })
                    .collect();
                let total = evaluated.len();
                let points: Vec<HessianSample> = evaluated.into_iter().flatten().collect();
                Ok(HessianSamples {
                    skipped: total - points.len(),
                    points,
                    grid: set.grid_points,
                    random: set.random_points,
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Hessian conditions checked at every sample of the box `𝕐`:
    /// `m₂ = inf λ_min(∇²Σμᵢℓ̃ᵢ)`, `m₁ = max(0, sup λ_max(∇²(λ̃ᵀf)))`.
    pub fn certify_global_sampled(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        if !self.p.is_bounded() {
            return Err(VerifierError::Unbounded);
        }
        let g = self.equilibrium(w, &[])?;
        self.global_at(w, &g.best)
    }

    fn global_at(&self, w: &Weights, e: &EquilibriumSolution) -> Result<Certificate, VerifierError> {
        let samples = self.hessian_samples()?;
        let mut cert = Certificate::new(Status::Inconclusive, Method::GlobalSampled, w, "");
        cert.note = Some("sampled, not a proof".into());
        cert.equilibrium = Some(e.clone());
        let corr = build_correction(w, &self.storages, e)?;
        cert.lambda_tilde = Some(corr.lambda_tilde.iter().copied().collect());
        cert.storage = Some(corr.combined.clone());

        let per_point: Vec<(f64, f64)> = samples
            .points
            .par_iter()
            .map(|s| {
                let h2 = self.rotated_hessian(w, &s.cost_hess, &s.f);
                let h1 = Self::correction_hessian(&corr.lambda_tilde, &s.f);
                (min_eigenvalue(&h2), max_eigenvalue(&h1))
            })
            .collect();
        if per_point.is_empty() {
            return Err(StorageError::EmptySamples.into());
        }
        let (mut i2, mut i1) = (0, 0);
        for (k, (a, b)) in per_point.iter().enumerate() {
            if *a < per_point[i2].0 {
                i2 = k;
            }
            if *b > per_point[i1].1 {
                i1 = k;
            }
        }
        let m2 = per_point[i2].0;
        let m1 = per_point[i1].1.max(0.0);
        cert.m1 = Some(m1);
        cert.m2 = Some(m2);
        let at = |k: usize, value: f64, description: &str| Witness {
            x: samples.points[k].x.clone(),
            u: samples.points[k].u.clone(),
            value,
            description: description.into(),
            direction: None,
        };
        cert.witnesses.push(at(i2, m2, "sample minimising the smallest eigenvalue of the weighted rotated-cost Hessian"));
        cert.witnesses.push(at(i1, per_point[i1].1, "sample maximising the largest eigenvalue of the correction Hessian"));

        let base = self.p.combine_costs(w)?;
        let set = SampleSet::on_problem(self.p, self.cfg.global.per_dim, self.cfg.global.random, self.cfg.seed)?;
        let used = samples.points.len();
        cert.samples = Some(SampleCounts {
            grid: samples.grid,
            random: samples.random,
            used,
            skipped: samples.skipped,
        });
        if let Ok(r) = self.margin(base, &corr.combined, e, &set) {
            cert.alpha_coefficient = Some(r.c_star);
            cert.local_radius = Some(r.local_radius);
        }

        if !e.interior {
            cert.reason = "optimal equilibrium is not in the interior of the constraints".into();
        } else if m2 - m1 > STRICTNESS {
            cert.status = Status::CertifiedGlobalSampled;
            cert.reason = format!("sampled m2 = {m2:.6e} > m1 = {m1:.6e} over {used} samples");
        } else {
            cert.reason = format!("sampled m2 = {m2:.6e} does not exceed m1 = {m1:.6e} over {used} samples");
        }
        Ok(cert)
    }

    /// Quadratic dissipation margin of the single cost `i` with its own storage.
    pub fn single_cost_margin(&self, i: usize, samples: &SampleSet) -> Result<DissipationReport, VerifierError> {
        self.margin(self.p.costs[i].clone(), &self.storages[i], &self.endpoints[i], samples)
    }

    /// Sample set used for dissipation margins of the shared-equilibrium path.
    pub fn shared_samples(&self) -> SampleSet {
        self.region_samples(self.cfg.global, &self.endpoints[0])
    }

    /// Combination at a common optimal equilibrium: `λ_μ = Σ μᵢλᵢ`,
    /// `α_μ = Σ μᵢαᵢ`.
    pub fn certify_shared_equilibrium(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        if let Some(i) = w.vertex() {
            let mut cert = self.single_cost(w)?;
            cert.reason = format!("single cost {}: {}", i + 1, cert.reason);
            return Ok(cert);
        }
        let active: Vec<usize> = (0..w.len()).filter(|&i| w.as_slice()[i] > 0.0).collect();
        let e0 = &self.endpoints[active[0]];
        let spread = active
            .iter()
            .flat_map(|&i| self.endpoints[i].x_e.iter().zip(&e0.x_e).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let mut cert = Certificate::new(Status::Inconclusive, Method::SharedEquilibrium, w, "");
        if spread > SHARED_TOL {
            cert.reason = format!("single-cost equilibria differ by {spread:.3e}");
            return Ok(cert);
        }
        let samples = self.shared_samples();
        let mut alpha = 0.0;
        for &i in &active {
            let c = self.single_cost_margin(i, &samples)?.c_star;
            if c <= STRICTNESS {
                cert.reason = format!("cost {} has no positive dissipation margin (c = {c:.3e})", i + 1);
                return Ok(cert);
            }
            alpha += w.as_slice()[i] * c;
        }
        let parts: Vec<(f64, &StorageFunction)> = w.as_slice().iter().copied().zip(&self.storages).collect();
        let storage = StorageFunction::combine(&parts, &DVector::zeros(self.p.n));
        let cost = self.p.combine_costs(w)?;
        let e = solve_kkt_for(self.p, &cost, &e0.guess()).unwrap_or_else(|_| e0.clone());
        cert.status = Status::CertifiedSharedEquilibrium;
        cert.reason = "single-cost optimal equilibria coincide".into();
        cert.alpha_coefficient = Some(alpha);
        cert.pre_dissipative_only = self.pre_dissipative_only(&storage);
        cert.storage = Some(storage);
        cert.equilibrium = Some(e);
        cert.samples = Some(SampleCounts {
            grid: samples.grid_points,
            random: samples.random_points,
            used: samples.len(),
            skipped: 0,
        });
        Ok(cert)
    }

    fn convexity(&self, l: &Expr, samples: &SampleSet) -> Option<(f64, Witness)> {
        let vals: Vec<Option<f64>> = samples
            .points
            .par_iter()
            .map(|(x, u)| l.eval_jet2(x, u).ok().map(|j| min_eigenvalue(&j.hess())))
            .collect();
        let (k, v) = vals
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        let (x, u) = samples.points[k].clone();
        Some((
            v,
            Witness {
                x,
                u,
                value: v,
                description: "smallest sampled Hessian eigenvalue of the cost".into(),
                direction: None,
            },
        ))
    }

    /// Linear dynamics with convex costs, at least one strictly convex with
    /// positive weight: storage `λ(x) = ν_μᵀx`. With `lower_bound` and a
    /// vertex weight `eᵢ`, instead verify that the convex `ℓ̂ ≤ ℓᵢ` touches
    /// `ℓᵢ` at its optimal equilibrium.
    pub fn certify_convex(&self, w: &Weights, lower_bound: Option<&Expr>) -> Result<Certificate, VerifierError> {
        if !self.p.has_linear_dynamics() {
            return Err(VerifierError::NotApplicable("dynamics are not linear".into()));
        }
        if let (Some(i), Some(lb)) = (w.vertex(), lower_bound) {
            return self.certify_lower_bound(w, i, lb);
        }
        let g = self.equilibrium(w, &[])?;
        let e = g.best.clone();
        let samples = self.region_samples(self.cfg.convex, &e);
        let mut cert = Certificate::new(Status::Inconclusive, Method::Convex, w, "");
        cert.equilibrium = Some(e.clone());

        let mut strict = false;
        for (i, (l, mu)) in self.p.costs.iter().zip(w.as_slice()).enumerate() {
            if *mu == 0.0 {
                continue;
            }
            let Some((min_eig, witness)) = self.convexity(l, &samples) else {
                cert.reason = format!("cost {} could not be evaluated on the samples", i + 1);
                return Ok(cert);
            };
            if min_eig < -STRICTNESS {
                cert.reason = format!("cost {} is not convex (Hessian eigenvalue {min_eig:.3e})", i + 1);
                cert.witnesses.push(witness);
                return Ok(cert);
            }
            strict |= min_eig >= STRICTNESS;
        }
        if !strict {
            cert.reason = "no cost with positive weight is strictly convex".into();
            return Ok(cert);
        }
        if !self.p.is_unconstrained() && !g.candidates.iter().any(|c| self.p.slack(&c.x_e, &c.u_e) > 0.0) {
            return Err(VerifierError::NoSlaterPoint);
        }
        let storage = StorageFunction::linear(e.nu.clone(), Provenance::UserSupplied);
        let base = self.p.combine_costs(w)?;
        if let Ok(r) = self.margin(base, &storage, &e, &samples) {
            cert.alpha_coefficient = Some(r.c_star);
            cert.local_radius = Some(r.local_radius);
        }
        cert.status = Status::CertifiedConvex;
        cert.reason = "linear dynamics, convex costs, strictly convex weighted cost".into();
        cert.pre_dissipative_only = self.pre_dissipative_only(&storage);
        cert.storage = Some(storage);
        cert.samples = Some(SampleCounts {
            grid: samples.grid_points,
            random: samples.random_points,
            used: samples.len(),
            skipped: 0,
        });
        Ok(cert)
    }

    fn certify_lower_bound(&self, w: &Weights, i: usize, lb: &Expr) -> Result<Certificate, VerifierError> {
        let e = &self.endpoints[i];
        let l = &self.p.costs[i];
        let samples = self.region_samples(self.cfg.convex, e);
        let mut cert = Certificate::new(Status::Inconclusive, Method::ConvexLowerBound, w, "");
        cert.equilibrium = Some(e.clone());

        let gaps: Vec<Option<f64>> = samples
            .points
            .par_iter()
            .map(|(x, u)| Some(lb.eval(x, u).ok()? - l.eval(x, u).ok()?))
            .collect();
        if let Some((k, gap)) = gaps
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.map(|g| (k, g)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
        {
            if gap > 1e-9 {
                let (x, u) = samples.points[k].clone();
                cert.reason = format!("lower bound exceeds the cost by {gap:.3e}");
                cert.witnesses.push(Witness {
                    x,
                    u,
                    value: gap,
                    description: "lower bound minus cost".into(),
                    direction: None,
                });
                return Ok(cert);
            }
        }
        let touch = (lb.eval(&e.x_e, &e.u_e).map_err(StorageError::from)? - e.cost_value).abs();
        if touch > 1e-9 {
            cert.reason = format!("lower bound differs from the cost at the equilibrium by {touch:.3e}");
            return Ok(cert);
        }
        match self.convexity(lb, &samples) {
            Some((v, _)) if v >= STRICTNESS => {}
            Some((v, witness)) => {
                cert.reason = format!("lower bound is not strictly convex (Hessian eigenvalue {v:.3e})");
                cert.witnesses.push(witness);
                return Ok(cert);
            }
            None => {
                cert.reason = "lower bound could not be evaluated".into();
                return Ok(cert);
            }
        }
        let Ok(eh) = solve_kkt_for(self.p, lb, &e.guess()) else {
            cert.reason = "no KKT point of the lower bound near the equilibrium".into();
            return Ok(cert);
        };
        let moved = eh
            .x_e
            .iter()
            .chain(&eh.u_e)
            .zip(e.x_e.iter().chain(&e.u_e))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if moved > 1e-6 {
            cert.reason = format!("optimal equilibrium of the lower bound is {moved:.3e} away");
            return Ok(cert);
        }
        let storage = StorageFunction::linear(eh.nu.clone(), Provenance::UserSupplied);
        cert.status = Status::CertifiedConvex;
        cert.reason = format!("cost {} is bounded below by a strictly convex cost touching it at its optimal equilibrium", i + 1);
        cert.pre_dissipative_only = self.pre_dissipative_only(&storage);
        cert.storage = Some(storage);
        Ok(cert)
    }

    fn single_cost(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        if let Ok(c) = self.certify_convex(w, None) {
            if c.status.is_certified() {
                return Ok(c);
            }
        }
        self.local_then_global(w)
    }

    fn local_then_global(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        let local = self.certify_local(w)?;
        if local.status == Status::Refuted || !self.p.is_bounded() {
            return Ok(local);
        }
        let e = local.equilibrium.clone().expect("local certificate has an equilibrium");
        let global = self.global_at(w, &e)?;
        if global.status.is_certified() {
            return Ok(global);
        }
        Ok(local)
    }

    /// Try the convex, shared-equilibrium, local and globally sampled tests in
    /// that order and return the first certificate, a refutation, or the local
    /// result.
    pub fn certify(&self, w: &Weights) -> Result<Certificate, VerifierError> {
        if w.vertex().is_some() {
            return self.single_cost(w);
        }
        if let Ok(c) = self.certify_convex(w, None) {
            if c.status.is_certified() {
                return Ok(c);
            }
        }
        let shared = self.certify_shared_equilibrium(w)?;
        if shared.status.is_certified() {
            return Ok(shared);
        }
        self.local_then_global(w)
    }

    /// Weighted sweep `μ_k = k/(K − 1)` over two costs, flagging
    /// discontinuities of the optimal equilibrium.
    pub fn continuity_scan(&self, opts: &ScanOptions) -> Result<SweepResult, VerifierError> {
        if self.p.num_costs() != 2 {
            return Err(VerifierError::NotApplicable("the scan needs exactly two costs".into()));
        }
        let k = opts.grid.max(3);
        let grid: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        let mut records = Vec::with_capacity(k);
        let mut prev: Option<Guess> = None;
        for &mu in &grid {
            let w = Weights::pair(mu)?;
            let warm: Vec<Guess> = prev.iter().cloned().collect();
            let rec = match self.equilibrium(&w, &warm) {
                Ok(g) => {
                    prev = Some(g.best.guess());
                    self.sweep_record(mu, &w, &g.best)
                }
                Err(err) => SweepRecord::failed(mu, err.to_string()),
            };
            records.push(rec);
        }

        let steps: Vec<Option<f64>> = records
            .windows(2)
            .map(|r| match (&r[0].x_e, &r[1].x_e) {
                (Some(a), Some(b)) => Some(distance(a, b)),
                _ => None,
            })
            .collect();
        let mut sorted: Vec<f64> = steps.iter().flatten().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median_step = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let threshold = opts.threshold.unwrap_or((10.0 * median_step).max(opts.threshold_floor));

        let mut jumps = Vec::new();
        for (i, s) in steps.iter().enumerate() {
            let Some(size) = *s else { continue };
            if size <= threshold {
                continue;
            }
            let (lo, hi, refined) = self.refine_jump(
                (grid[i], records[i].x_e.clone().unwrap_or_default()),
                (grid[i + 1], records[i + 1].x_e.clone().unwrap_or_default()),
                opts.refine_width,
            )?;
            if refined > threshold {
                jumps.push(Jump {
                    mu_lo: grid[i],
                    mu_hi: grid[i + 1],
                    size,
                    refined_lo: lo,
                    refined_hi: hi,
                    refined_size: refined,
                });
                for r in &mut records[i..=i + 1] {
                    r.status = Status::Refuted;
                    r.jump_adjacent = true;
                }
            }
        }
        Ok(SweepResult {
            grid,
            records,
            jumps,
            median_step,
            threshold,
        })
    }

    fn sweep_record(&self, mu: f64, w: &Weights, e: &EquilibriumSolution) -> SweepRecord {
        let local = self.local_at(w, e, false);
        let (status, min_eig, lambda_tilde) = match &local {
            Ok(c) => {
                let min_eig = c.hessian.as_ref().map(|h| {
                    let d = h.len();
                    min_eigenvalue(&DMatrix::from_fn(d, d, |i, j| h[i][j]))
                });
                (c.status, min_eig, c.lambda_tilde.clone())
            }
            Err(_) => (Status::Inconclusive, None, None),
        };
        SweepRecord {
            mu,
            x_e: Some(e.x_e.clone()),
            u_e: Some(e.u_e.clone()),
            nu: Some(e.nu.clone()),
            lambda_tilde,
            min_hessian_eigenvalue: min_eig,
            interior: e.interior,
            status,
            jump_adjacent: false,
            error: local.err().map(|e| e.to_string()),
        }
    }

    /// Bisect `[a, b]`, keeping the half with the larger equilibrium step,
    /// until its width is below `width`. A true discontinuity keeps its step
    /// size; a continuous branch shrinks with the interval.
    fn refine_jump(&self, a: (f64, Vec<f64>), b: (f64, Vec<f64>), width: f64) -> Result<(f64, f64, f64), VerifierError> {
        let (mut a, mut b) = (a, b);
        while b.0 - a.0 > width {
            let mid = 0.5 * (a.0 + b.0);
            let w = Weights::pair(mid)?;
            let Ok(g) = self.equilibrium(&w, &[]) else { break };
            let xm = g.best.x_e;
            if distance(&a.1, &xm) >= distance(&xm, &b.1) {
                b = (mid, xm);
            } else {
                a = (mid, xm);
            }
        }
        Ok((a.0, b.0, distance(&a.1, &b.1)))
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub grid: usize,
    /// Absolute jump threshold; by default `max(10 × median step, floor)`.
    pub threshold: Option<f64>,
    pub threshold_floor: f64,
    /// Width to which flagged intervals are bisected.
    pub refine_width: f64,
}

impl ScanOptions {
    pub fn new(grid: usize) -> Self {
        ScanOptions {
            grid,
            threshold: None,
            threshold_floor: 1e-3,
            refine_width: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub mu: f64,
    pub x_e: Option<Vec<f64>>,
    pub u_e: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub lambda_tilde: Option<Vec<f64>>,
    pub min_hessian_eigenvalue: Option<f64>,
    pub interior: bool,
    pub status: Status,
    /// Refuted because an adjacent interval contains an equilibrium jump.
    pub jump_adjacent: bool,
    pub error: Option<String>,
}

impl SweepRecord {
    fn failed(mu: f64, error: String) -> Self {
        SweepRecord {
            mu,
            x_e: None,
            u_e: None,
            nu: None,
            lambda_tilde: None,
            min_hessian_eigenvalue: None,
            interior: false,
            status: Status::Inconclusive,
            jump_adjacent: false,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Jump {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub size: f64,
    pub refined_lo: f64,
    pub refined_hi: f64,
    pub refined_size: f64,
}

impl Jump {
    pub fn contains(&self, mu: f64) -> bool {
        self.mu_lo <= mu && mu <= self.mu_hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub records: Vec<SweepRecord>,
    pub jumps: Vec<Jump>,
    pub median_step: f64,
    pub threshold: f64,
}
