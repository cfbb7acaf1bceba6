//! Shared generators for integration tests.

use dissipcert::expr::Expr;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random smooth expression in `x1, x2, u1` that stays finite on `[-1, 1]³`.
pub fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    let leaf = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
        0 => Expr::state(0),
        1 => Expr::state(1),
        2 => Expr::input(0),
        _ => Expr::constant(rng.gen_range(-1.0..1.0)),
    };
    if depth == 0 || rng.gen_bool(0.2) {
        return leaf(rng);
    }
    let a = random_expr(rng, depth - 1);
    let positive = |rng: &mut ChaCha8Rng, e: Expr| Expr::constant(rng.gen_range(0.5..2.0)) + e.clone() * e;
    match rng.gen_range(0..9) {
        0 => a + random_expr(rng, depth - 1),
        1 => a - random_expr(rng, depth - 1),
        2 => a * random_expr(rng, depth - 1),
        3 => {
            let b = random_expr(rng, depth - 1);
            a / positive(rng, b)
        }
        4 => (Expr::constant(0.5) * a).exp(),
        5 => positive(rng, a).ln(),
        6 => {
            let exps = [0.5, 1.5, -0.7];
            positive(rng, a).powf(exps[rng.gen_range(0..3)])
        }
        7 => a.pow(Expr::constant(rng.gen_range(2..=3) as f64)),
        _ => -a,
    }
}
