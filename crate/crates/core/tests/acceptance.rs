//! Acceptance criteria. Prints one PASS/FAIL line per criterion, followed by
//! the failing sub-checks, and exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dissipcert::equilibrium::{find_global_equilibrium, lq_scalar_closed_form, solve_kkt, Guess, Multistart};
use dissipcert::lq::{check_nu_linearity, lmi_margin, solve_lmi};
use dissipcert::model::{load_problem, Problem, Weights};
use dissipcert::ocp::{pareto_sweep, solve_ocp, OcpOptions};
use dissipcert::storage::{build_rotated_cost, check_dissipation_inequality, Provenance, StorageFunction};
use dissipcert::verifier::{ScanOptions, Status, Verifier, VerifierConfig};

mod common;

use common::random_expr;

struct Checks(Vec<(bool, String)>);

impl Checks {
    fn new() -> Self {
        Checks(Vec::new())
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.0.push((ok, what.into()));
    }

    fn close(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        self.check((got - want).abs() <= tol, format!("{what}: got {got:.9}, want {want} ± {tol:e}"));
    }

    fn fail(&mut self, what: impl std::fmt::Display) {
        self.check(false, what.to_string());
    }
}

fn problem(name: &str) -> Problem {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "problems", name].iter().collect();
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    load_problem(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn grid(k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| i as f64 / (k - 1) as f64)
}

fn growth_equilibria(c: &mut Checks) {
    let p = problem("ex47.prob");
    for (mu, x, u, nu, nu_tol) in [
        (0.5, 0.1786289, -0.1709482, 1.111667, 1e-5),
        (0.0, 0.2618259, -0.2357480, 2.1986096, 1e-6),
    ] {
        match find_global_equilibrium(&p, &Weights::pair(mu).unwrap(), &Multistart::default()) {
            Ok(g) => {
                c.close(&format!("mu={mu} x_e"), g.best.x_e[0], x, 1e-6);
                c.close(&format!("mu={mu} u_e"), g.best.u_e[0], u, 1e-6);
                c.close(&format!("mu={mu} nu"), g.best.nu[0], nu, nu_tol);
            }
            Err(e) => c.fail(format!("mu={mu}: {e}")),
        }
    }
}

fn nonlinear_refutation(c: &mut Checks) {
    let p = problem("ex47.prob");
    let w = Weights::pair(0.5).unwrap();
    let e = find_global_equilibrium(&p, &w, &Multistart::default()).unwrap().best;
    let s = StorageFunction::linear(vec![1.111667], Provenance::UserSupplied);
    let rc = build_rotated_cost(&p, &w, &s, &e).unwrap();
    let h = rc.jet2(&e.x_e, &e.u_e).unwrap();
    c.close("d2/du2 of rotated cost at equilibrium", h.hess_entry(1, 1), -0.306538, 1e-5);
    let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
    match v.certify(&w) {
        Ok(cert) => c.check(cert.status == Status::Refuted, format!("certify at mu=0.5: {:?}", cert.status)),
        Err(err) => c.fail(format!("certify: {err}")),
    }
}

fn growth_global(c: &mut Checks) {
    let p = problem("ex49.prob");
    let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
    let ends = v.endpoints();
    c.close("equilibrium 1 x", ends[0].x_e[0], 0.6214, 1e-3);
    c.close("equilibrium 1 u", ends[0].u_e[0], 1.1537, 1e-3);
    c.close("equilibrium 2 x", ends[1].x_e[0], 0.2507, 1e-3);
    c.close("equilibrium 2 u", ends[1].u_e[0], 0.3607, 1e-3);
    c.close("storage slope 1", v.storages()[0].gradient(&[0.0])[0], 0.3226, 1e-3);
    c.close("storage slope 2", v.storages()[1].gradient(&[0.0])[0], 0.5223, 1e-3);

    let mut m2_min = f64::INFINITY;
    let mut m1_max = f64::NEG_INFINITY;
    let mut lt_max = f64::NEG_INFINITY;
    let mut not_certified = Vec::new();
    let mut nonpositive = Vec::new();
    for mu in grid(101) {
        let w = Weights::pair(mu).unwrap();
        let cert = match v.certify_global_sampled(&w) {
            Ok(cert) => cert,
            Err(e) => {
                c.fail(format!("mu={mu}: {e}"));
                continue;
            }
        };
        m2_min = m2_min.min(cert.m2.unwrap_or(f64::NAN));
        m1_max = m1_max.max(cert.m1.unwrap_or(f64::NAN));
        let lt = cert.lambda_tilde.as_ref().map_or(f64::NAN, |l| l[0]);
        lt_max = lt_max.max(lt);
        let vertex = mu == 0.0 || mu == 1.0;
        if (vertex && lt.abs() > 1e-9) || (!vertex && !(lt > 0.0)) {
            nonpositive.push(format!("{mu}:{lt:.3e}"));
        }
        if cert.status != Status::CertifiedGlobalSampled {
            not_certified.push(mu);
        }
    }
    c.check((m2_min - 5.9).abs() <= 0.05 * 5.9, format!("sampled m2 within 5% of 5.9: got min over grid {m2_min:.6}"));
    c.check(m1_max <= 1e-8, format!("m1 <= 1e-8: got max over grid {m1_max:.6}"));
    c.check(nonpositive.is_empty(), format!("lambda_tilde > 0 inside, 0 at the endpoints: violations {nonpositive:?}"));
    c.check(lt_max <= 0.0144 + 1e-3, format!("lambda_tilde <= 0.0154: got max {lt_max:.6}"));
    c.check(
        not_certified.is_empty(),
        format!("CertifiedGlobalSampled on all 101 weights: {} weights not certified", not_certified.len()),
    );

    let local = v.certify_local(&Weights::pair(0.5).unwrap()).unwrap();
    c.check(local.status == Status::CertifiedLocal, format!("local certificate at mu=0.5: {:?}", local.status));
}

fn discontinuity(c: &mut Checks) {
    let p = problem("ex42.prob");
    let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
    let scan = match v.continuity_scan(&ScanOptions::new(83)) {
        Ok(s) => s,
        Err(e) => return c.fail(format!("scan: {e}")),
    };
    let star = 32.0 / 41.0;
    c.check(scan.jumps.len() == 1, format!("exactly one jump interval: got {}", scan.jumps.len()));
    if let Some(j) = scan.jumps.first() {
        c.check(j.contains(star), format!("interval [{}, {}] contains 32/41", j.mu_lo, j.mu_hi));
        c.check(
            j.refined_lo <= star + 1e-6 && star - 1e-6 <= j.refined_hi,
            format!("refined interval [{:.9}, {:.9}] brackets 32/41", j.refined_lo, j.refined_hi),
        );
        let certified: Vec<f64> = scan
            .records
            .iter()
            .filter(|r| j.contains(r.mu) && r.status.is_certified())
            .map(|r| r.mu)
            .collect();
        c.check(certified.is_empty(), format!("no certified weight in the flagged interval: {certified:?}"));
    }
}

fn lq_cross_check(c: &mut Checks) {
    let p = problem("eq36.prob");
    let lq = p.extract_lq().unwrap();
    let mut worst: f64 = 0.0;
    for mu in grid(101) {
        let w = Weights::pair(mu).unwrap();
        let closed = lq_scalar_closed_form(&lq, &w).unwrap();
        match solve_kkt(&p, &w, &Guess::new(vec![0.0], vec![0.0], vec![0.0])) {
            Ok(newton) => {
                for (a, b) in [
                    (closed.x_e[0], newton.x_e[0]),
                    (closed.u_e[0], newton.u_e[0]),
                    (closed.nu[0], newton.nu[0]),
                ] {
                    worst = worst.max((a - b).abs());
                }
            }
            Err(e) => c.fail(format!("newton at mu={mu}: {e}")),
        }
    }
    c.check(worst <= 1e-9, format!("closed form vs Newton: max difference {worst:.3e}"));
    let dev = check_nu_linearity(&lq, 101).unwrap().max_deviation;
    c.check(dev > 0.1, format!("nu deviation from linear exceeds 0.1: got {dev:.6}"));

    let ratio = load_problem("[dims] n=1 m=1\n[dynamics]\nf1 = 2*x1 + 4*u1\n[cost 1]\nl = x1^2 + 2*u1^2 + 6*x1 + 7*u1\n[cost 2]\nl = 2*x1^2 + 4*u1^2 + 3*x1 + 8*u1\n")
        .unwrap();
    let dev = check_nu_linearity(&ratio.extract_lq().unwrap(), 101).unwrap().max_deviation;
    c.check(dev <= 1e-9, format!("q1 r2 = q2 r1 deviation below 1e-9: got {dev:.3e}"));
    let unit = load_problem("[dims] n=1 m=1\n[dynamics]\nf1 = x1 + 4*u1\n[cost 1]\nl = 0.1*x1^2 + 10*u1^2 + 6*x1 + 7*u1\n[cost 2]\nl = 4*x1^2 + 3*u1^2 + 3*x1 + 8*u1\n")
        .unwrap();
    let dev = check_nu_linearity(&unit.extract_lq().unwrap(), 101).unwrap().max_deviation;
    c.check(dev <= 1e-9, format!("a = 1 deviation below 1e-9: got {dev:.3e}"));
}

fn random_schur(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let target = rng.gen_range(0.0..0.95);
    if rho > 0.0 {
        a * (target / rho)
    } else {
        a
    }
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let rank = rng.gen_range(0..=n);
    let b = DMatrix::from_fn(rank, n, |_, _| rng.gen_range(-2.0..2.0));
    b.transpose() * b
}

fn lmi_properties(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    let mut combo_worst = f64::INFINITY;
    for trial in 0..200 {
        let n = 1 + trial % 4;
        let a = random_schur(&mut rng, n);
        let q1 = random_psd(&mut rng, n);
        let q2 = random_psd(&mut rng, n);
        let (s1, s2) = match (solve_lmi(&a, &q1, false), solve_lmi(&a, &q2, false)) {
            (Ok(s1), Ok(s2)) => (s1, s2),
            (Err(e), _) | (_, Err(e)) => return c.fail(format!("trial {trial}: {e}")),
        };
        worst = worst.min(s1.margin).min(s2.margin);
        for mu in grid(101) {
            let q = &q1 * mu + &q2 * (1.0 - mu);
            let pm = &s1.p * mu + &s2.p * (1.0 - mu);
            combo_worst = combo_worst.min(lmi_margin(&a, &q, &pm));
        }
    }
    c.check(worst > 0.0, format!("Schur-stable A, PSD Q: minimum margin {worst:.3e}"));
    c.check(combo_worst > 0.0, format!("convex combinations: minimum margin {combo_worst:.3e}"));
    let one = DMatrix::from_element(1, 1, 1.0);
    let zero = DMatrix::zeros(1, 1);
    match solve_lmi(&one, &zero, false) {
        Ok(s) => c.check(!s.feasible, format!("A = 1, Q = 0 infeasible: feasible={} margin={:.3e}", s.feasible, s.margin)),
        Err(e) => c.fail(format!("A = 1, Q = 0: {e}")),
    }
}

fn pareto_front(c: &mut Checks) {
    let p = problem("ex47.prob");
    let opts = OcpOptions::default();
    let r = match pareto_sweep(&p, &[1.0], 10, 101, &opts) {
        Ok(r) => r,
        Err(e) => return c.fail(format!("sweep: {e}")),
    };
    let f = &r.front;
    c.check(!f.is_empty(), format!("front has {} points", f.len()));
    c.check(r.failures.is_empty(), format!("solver failures: {:?}", r.failures));
    let sorted = f.windows(2).all(|w| w[0].j1 < w[1].j1 && w[1].j2 <= w[0].j2);
    c.check(sorted, "sorted by J1 with J2 nonincreasing");
    let dominated = f.iter().any(|a| f.iter().any(|b| b.j1 <= a.j1 && b.j2 <= a.j2 && (b.j1 < a.j1 || b.j2 < a.j2)));
    c.check(!dominated, "no retained point is dominated");
    let unconverged = r.solutions.iter().filter(|s| !s.converged).count();
    c.check(unconverged == 0, format!("all grid solves converged: {unconverged} did not"));

    let end1 = solve_ocp(&p, &Weights::pair(1.0).unwrap(), &[1.0], 10, &opts).unwrap();
    let end0 = solve_ocp(&p, &Weights::pair(0.0).unwrap(), &[1.0], 10, &opts).unwrap();
    if let (Some(first), Some(last)) = (f.first(), f.last()) {
        c.close("front J1 minimum vs single-objective solve", first.j1, end1.j, 1e-6);
        c.close("front J2 minimum vs single-objective solve", last.j2, end0.j, 1e-6);
    }
    let mut worst: f64 = 0.0;
    for a in f {
        let own = a.mu * a.j1 + (1.0 - a.mu) * a.j2;
        for b in f {
            worst = worst.max(own - (a.mu * b.j1 + (1.0 - a.mu) * b.j2));
        }
    }
    c.check(worst <= 1e-8, format!("weighted-sum minimal among retained points: worst excess {worst:.3e}"));
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn ad_finite_differences(c: &mut Checks) {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_grad: f64 = 0.0;
    let mut worst_hess: f64 = 0.0;
    for _ in 0..100 {
        let e = random_expr(&mut rng, 4);
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let split = |v: &[f64]| (v[..2].to_vec(), v[2..].to_vec());
        let (x, u) = split(&z);
        let jet = match e.eval_jet2(&x, &u) {
            Ok(j) => j,
            Err(err) => return c.fail(format!("{e}: {err}")),
        };
        let shifted = |i: usize, s: f64| {
            let mut v = z.clone();
            v[i] += s;
            split(&v)
        };
        for i in 0..3 {
            let (xp, up) = shifted(i, H);
            let (xm, um) = shifted(i, -H);
            let fd = (e.eval(&xp, &up).unwrap() - e.eval(&xm, &um).unwrap()) / (2.0 * H);
            worst_grad = worst_grad.max(relative(jet.grad[i], fd));
            let gp = e.eval_jet1(&xp, &up).unwrap().grad;
            let gm = e.eval_jet1(&xm, &um).unwrap().grad;
            for j in 0..3 {
                let fd = (gp[j] - gm[j]) / (2.0 * H);
                worst_hess = worst_hess.max(relative(jet.hess_entry(i, j), fd));
            }
        }
    }
    c.check(worst_grad <= 1e-6, format!("gradient: worst relative error {worst_grad:.3e}"));
    c.check(worst_hess <= 1e-6, format!("Hessian: worst relative error {worst_hess:.3e}"));
}

fn shared_equilibrium(c: &mut Checks) {
    let p = problem("shared.prob");
    let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
    let samples = v.shared_samples();
    let c1 = v.single_cost_margin(0, &samples).unwrap().c_star;
    let c2 = v.single_cost_margin(1, &samples).unwrap().c_star;
    c.check(c1 > 0.0 && c2 > 0.0, format!("single-cost margins positive: c1={c1:.6}, c2={c2:.6}"));
    let (s1, s2) = (&v.storages()[0], &v.storages()[1]);
    for mu in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let w = Weights::pair(mu).unwrap();
        let e = v.equilibrium(&w, &[]).unwrap().best;
        let combined = StorageFunction::combine(&[(mu, s1), (1.0 - mu, s2)], &nalgebra::DVector::zeros(p.n));
        let rc = build_rotated_cost(&p, &w, &combined, &e).unwrap();
        let report = check_dissipation_inequality(&p, &rc, &samples).unwrap();
        let bound = mu * c1 + (1.0 - mu) * c2;
        c.check(
            report.c_star >= bound - 1e-9,
            format!("mu={mu}: margin {:.9} >= {bound:.9} - 1e-9", report.c_star),
        );
        let cert = v.certify_shared_equilibrium(&w).unwrap();
        c.check(cert.status.is_certified(), format!("mu={mu}: shared-equilibrium certificate {:?}", cert.status));
    }
}

type Criterion = (usize, &'static str, fn(&mut Checks));

const CRITERIA: [Criterion; 9] = [
    (1, "equilibrium and multiplier, nonlinear dynamics", growth_equilibria),
    (2, "refutation with forced linear storage", nonlinear_refutation),
    (3, "global sampled certification, growth model", growth_global),
    (4, "equilibrium discontinuity scan", discontinuity),
    (5, "scalar LQ closed form and multiplier linearity", lq_cross_check),
    (6, "LMI feasibility properties", lmi_properties),
    (7, "Pareto front properties", pareto_front),
    (8, "automatic differentiation vs finite differences", ad_finite_differences),
    (9, "shared-equilibrium storage combination", shared_equilibrium),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut checks = Checks::new();
        run(&mut checks);
        let pass = !checks.0.is_empty() && checks.0.iter().all(|(ok, _)| *ok);
        println!(
            "criterion {id} {}: {name} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for (ok, what) in &checks.0 {
            if !ok {
                println!("    failed: {what}");
            }
        }
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
