//! Cross-module invariants checked on randomized inputs.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_expr;
use dissipcert::equilibrium::{find_global_equilibrium, lq_scalar_closed_form, solve_kkt, Guess, Multistart};
use dissipcert::expr::Expr;
use dissipcert::lq::{lmi_margin, synthesize_quadratic_storage};
use dissipcert::model::{load_problem, Problem, Weights};
use dissipcert::storage::{build_correction, build_rotated_cost, rotate};
use dissipcert::verifier::{Status, Verifier, VerifierConfig};

fn c(v: f64) -> Expr {
    Expr::constant(v)
}

/// `x⁺ = a x + b u` with costs `qᵢx² + rᵢu² + sᵢx + vᵢu`.
fn scalar_lq(a: f64, b: f64, costs: &[(f64, f64, f64, f64)]) -> Problem {
    let (x, u) = (Expr::state(0), Expr::input(0));
    let f = c(a) * x.clone() + c(b) * u.clone();
    let ls = costs
        .iter()
        .map(|&(q, r, s, v)| c(q) * x.clone() * x.clone() + c(r) * u.clone() * u.clone() + c(s) * x.clone() + c(v) * u.clone())
        .collect();
    Problem::new(1, 1, vec![f], ls).unwrap()
}

fn cost() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.1..5.0f64, 0.1..5.0f64, -5.0..5.0f64, -5.0..5.0f64)
}

fn dynamics() -> impl Strategy<Value = (f64, f64)> {
    (-2.0..2.0f64, prop_oneof![-2.0..-0.5f64, 0.5..2.0f64])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jet2_is_deterministic_and_symmetric(seed in any::<u64>(), z in prop::array::uniform3(-1.0..1.0f64)) {
        let e = random_expr(&mut ChaCha8Rng::seed_from_u64(seed), 4);
        let a = e.eval_jet2(&z[..2], &z[2..]).unwrap();
        let b = e.eval_jet2(&z[..2], &z[2..]).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        let h = a.hess();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(h[(i, j)].to_bits(), h[(j, i)].to_bits());
                prop_assert_eq!(h[(i, j)].to_bits(), b.hess()[(i, j)].to_bits());
            }
        }
    }

    #[test]
    fn extract_lq_is_lossless((a, b) in dynamics(), c1 in cost(), c2 in cost(),
                              x in -10.0..10.0f64, u in -10.0..10.0f64) {
        let p = scalar_lq(a, b, &[c1, c2]);
        let lq = p.extract_lq().unwrap();
        let (xv, uv) = (DVector::from_element(1, x), DVector::from_element(1, u));
        let f = (&lq.a * &xv + &lq.b * &uv)[0];
        prop_assert!((f - p.eval_dynamics(&[x], &[u]).unwrap()[0]).abs() <= 1e-12 * (1.0 + f.abs()));
        for (qc, l) in lq.costs.iter().zip(&p.costs) {
            let direct = l.eval(&[x], &[u]).unwrap();
            prop_assert!((qc.eval(&xv, &uv) - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn combined_cost_is_affine_in_weights(m1 in 0.0..1.0f64, m2 in 0.0..1.0f64,
                                          z in prop::array::uniform3(-1.0..1.0f64)) {
        let p = load_problem(include_str!("../../../problems/ex47.prob")).unwrap();
        let mid = 0.5 * (m1 + m2);
        let at = |mu: f64| p.combine_costs(&Weights::pair(mu).unwrap()).unwrap().eval(&z[..1], &z[2..]).unwrap();
        prop_assert!((at(mid) - 0.5 * (at(m1) + at(m2))).abs() <= 1e-12);
    }

    #[test]
    fn newton_matches_closed_form_and_is_an_equilibrium((a, b) in dynamics(), c1 in cost(), c2 in cost(), mu in 0.0..=1.0f64) {
        let p = scalar_lq(a, b, &[c1, c2]);
        let lq = p.extract_lq().unwrap();
        let w = Weights::pair(mu).unwrap();
        let closed = lq_scalar_closed_form(&lq, &w).unwrap();
        let newton = solve_kkt(&p, &w, &Guess::new(vec![0.0], vec![0.0], vec![0.0])).unwrap();
        prop_assert!(newton.equilibrium_residual(&p).unwrap() <= 1e-9);
        let scale = 1.0 + closed.x_e[0].abs().max(closed.u_e[0].abs()).max(closed.nu[0].abs());
        prop_assert!((closed.x_e[0] - newton.x_e[0]).abs() <= 1e-9 * scale);
        prop_assert!((closed.u_e[0] - newton.u_e[0]).abs() <= 1e-9 * scale);
        prop_assert!((closed.nu[0] - newton.nu[0]).abs() <= 1e-9 * scale);
    }

    #[test]
    fn synthesized_storage_gradient_is_multiplier((a, b) in dynamics(), c1 in cost(), c2 in cost(), mu in 0.0..=1.0f64) {
        let p = scalar_lq(a, b, &[c1, c2]);
        let lq = p.extract_lq().unwrap();
        let w = Weights::pair(mu).unwrap();
        let e = lq_scalar_closed_form(&lq, &w).unwrap();
        if let Ok(s) = synthesize_quadratic_storage(&lq, &w, &e) {
            prop_assert!((s.gradient(&e.x_e)[0] - e.nu[0]).abs() <= 1e-9 * (1.0 + e.nu[0].abs()));
            let rc = build_rotated_cost(&p, &w, &s, &e).unwrap();
            let j = rc.jet2(&e.x_e, &e.u_e).unwrap();
            prop_assert!(j.value.abs() <= 1e-9);
            prop_assert!(j.grad.iter().all(|g| g.abs() <= 1e-8 * (1.0 + e.nu[0].abs())));
        }
    }

    #[test]
    fn lmi_margin_is_exact_smallest_eigenvalue(entries in prop::collection::vec(-1.0..1.0f64, 27)) {
        let a = DMatrix::from_column_slice(3, 3, &entries[..9]);
        let q = DMatrix::from_column_slice(3, 3, &entries[9..18]);
        let q = &q * q.transpose();
        let p = DMatrix::from_column_slice(3, 3, &entries[18..]);
        let p = &p + p.transpose();
        let m = &q + &p - a.transpose() * &p * &a;
        let m = (&m + m.transpose()) * 0.5;
        let oracle = m.symmetric_eigen().eigenvalues.min();
        prop_assert!((lmi_margin(&a, &q, &p) - oracle).abs() <= 1e-12);
    }
}

#[test]
fn corrected_storage_recovers_multiplier_on_nonlinear_examples() {
    for text in [include_str!("../../../problems/ex47.prob"), include_str!("../../../problems/ex49.prob")] {
        let p = load_problem(text).unwrap();
        let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
        for i in 0..=10 {
            let w = Weights::pair(i as f64 / 10.0).unwrap();
            let e = v.equilibrium(&w, &[]).unwrap().best;
            let corr = build_correction(&w, v.storages(), &e).unwrap();
            assert!((corr.combined.gradient(&e.x_e)[0] - e.nu[0]).abs() <= 1e-12);
            let rc = rotate(&p, p.combine_costs(&w).unwrap(), &corr.combined, &e).unwrap();
            let j = rc.jet2(&e.x_e, &e.u_e).unwrap();
            assert!(j.value.abs() <= 1e-9);
            if e.interior && e.regular {
                assert!(j.grad.iter().all(|g| g.abs() <= 1e-8), "{:?}", j.grad);
            }
        }
    }
}

#[test]
fn local_certificates_are_sound_and_witnesses_reproduce() {
    for text in [include_str!("../../../problems/ex47.prob"), include_str!("../../../problems/ex49.prob")] {
        let p = load_problem(text).unwrap();
        let v = Verifier::new(&p, VerifierConfig::default()).unwrap();
        for i in 0..=10 {
            let w = Weights::pair(i as f64 / 10.0).unwrap();
            let cert = v.certify_local(&w).unwrap();
            let e = cert.equilibrium.clone().unwrap();
            let Some(rows) = &cert.hessian else { continue };
            let h = DMatrix::from_fn(2, 2, |r, c| rows[r][c]);
            let rc = rotate(&p, p.combine_costs(&w).unwrap(), cert.storage.as_ref().unwrap(), &e).unwrap();
            match cert.status {
                Status::CertifiedLocal => {
                    let bound = cert.m2.unwrap() - cert.m1.unwrap();
                    assert!(h.symmetric_eigen().eigenvalues.min() >= bound - 1e-12);
                }
                Status::Refuted => {
                    for wit in &cert.witnesses {
                        let again = rc.jet2(&wit.x, &wit.u).unwrap().hess().symmetric_eigen().eigenvalues.min();
                        assert!((again - wit.value).abs() <= 1e-10, "{again} vs {}", wit.value);
                    }
                }
                _ => {}
            }
        }
    }
}

#[test]
fn vertex_weights_match_single_cost_problem() {
    for text in [include_str!("../../../problems/ex47.prob"), include_str!("../../../problems/ex42.prob")] {
        let p = load_problem(text).unwrap();
        for i in 0..2 {
            let w = Weights::unit(i, 2);
            let a = find_global_equilibrium(&p, &w, &Multistart::default()).unwrap().best;
            let mut twin = p.clone();
            twin.costs = vec![p.costs[i].clone(), p.costs[i].clone()];
            let b = find_global_equilibrium(&twin, &Weights::pair(0.5).unwrap(), &Multistart::default())
                .unwrap()
                .best;
            assert!((a.x_e[0] - b.x_e[0]).abs() <= 1e-9);
            assert!((a.u_e[0] - b.u_e[0]).abs() <= 1e-9);
            assert!((a.nu[0] - b.nu[0]).abs() <= 1e-9);
        }
    }
}
