//! Scalar expressions over state variables `x1..xn` and inputs `u1..um`.
//!
//! Expressions are parsed once and evaluated either as plain `f64`, as a
//! first-order jet (value + gradient) or as a second-order jet (value +
//! gradient + Hessian) with respect to the stacked variable `(x, u)`.
//!
//! Grammar:
//!
//! ```text
//! expr   := term { ("+"|"-") term } ;
//! term   := factor { ("*"|"/") factor } ;
//! factor := base [ "^" factor ] ;
//! base   := number | ident | "(" expr ")" | "-" base | func "(" expr ")" ;
//! func   := "ln" | "exp" ;
//! ident  := ("x"|"u") digit+ ;
//! ```
//!
//! Unary minus belongs to `base`, so it binds tighter than `^`: `-x1^2`
//! parses as `(-x1)^2`. Write `-(x1^2)` or `0 - x1^2` for the other reading.

mod jet;
mod parse;

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

pub use jet::{Jet1, Jet2};
pub use parse::{parse_expression, ParseError};

use jet::Number;

/// A variable reference. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    State(usize),
    Input(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Ln,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Ln => "ln",
            Func::Exp => "exp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Expression tree. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Evaluation left the domain of a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DomainError {
    #[error("ln of nonpositive argument {0}")]
    LogOfNonPositive(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("zero raised to negative power {0}")]
    ZeroToNegativePower(f64),
    #[error("non-integer power {exponent} of nonpositive base {base}")]
    NonPositiveBase { base: f64, exponent: f64 },
    #[error("non-finite intermediate value")]
    NonFinite,
    #[error("point has wrong dimension: expected ({n}, {m}), got ({got_n}, {got_m})")]
    Dimension {
        n: usize,
        m: usize,
        got_n: usize,
        got_m: usize,
    },
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    /// State variable `x_{i+1}` (zero-based index).
    pub fn state(i: usize) -> Self {
        Expr::Var(Var::State(i))
    }

    /// Input variable `u_{j+1}` (zero-based index).
    pub fn input(j: usize) -> Self {
        Expr::Var(Var::Input(j))
    }

    pub fn ln(self) -> Self {
        Expr::Call(Func::Ln, Box::new(self))
    }

    pub fn exp(self) -> Self {
        Expr::Call(Func::Exp, Box::new(self))
    }

    pub fn pow(self, exponent: Expr) -> Self {
        Expr::Binary(BinOp::Pow, Box::new(self), Box::new(exponent))
    }

    pub fn powf(self, exponent: f64) -> Self {
        self.pow(Expr::Const(exponent))
    }

    /// Largest state and input index referenced (as counts, i.e. one-based).
    pub fn max_indices(&self) -> (usize, usize) {
        match self {
            Expr::Const(_) => (0, 0),
            Expr::Var(Var::State(i)) => (i + 1, 0),
            Expr::Var(Var::Input(j)) => (0, j + 1),
            Expr::Neg(a) | Expr::Call(_, a) => a.max_indices(),
            Expr::Binary(_, a, b) => {
                let (an, am) = a.max_indices();
                let (bn, bm) = b.max_indices();
                (an.max(bn), am.max(bm))
            }
        }
    }

    /// Value of the expression if it references no variables.
    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Var(_) => None,
            _ => {
                if self.max_indices() == (0, 0) {
                    self.eval(&[], &[]).ok()
                } else {
                    None
                }
            }
        }
    }

    /// Total polynomial degree, or `None` if the expression is not a
    /// polynomial in `(x, u)` (division by a non-constant, `ln`/`exp` of a
    /// non-constant, non-integer or negative powers of a non-constant).
    pub fn polynomial_degree(&self) -> Option<u32> {
        match self {
            Expr::Const(_) => Some(0),
            Expr::Var(_) => Some(1),
            Expr::Neg(a) => a.polynomial_degree(),
            Expr::Call(_, a) => a.constant_value().map(|_| 0),
            Expr::Binary(op, a, b) => {
                let da = a.polynomial_degree()?;
                match op {
                    BinOp::Add | BinOp::Sub => Some(da.max(b.polynomial_degree()?)),
                    BinOp::Mul => Some(da + b.polynomial_degree()?),
                    BinOp::Div => b.constant_value().filter(|c| *c != 0.0).map(|_| da),
                    BinOp::Pow => {
                        let e = b.constant_value()?;
                        if da == 0 {
                            Some(0)
                        } else if e >= 0.0 && e.fract() == 0.0 && e <= 64.0 {
                            Some(da * e as u32)
                        } else {
                            None
                        }
                    }
                }
            }
        }
    }

    fn eval_generic<S: Number>(&self, x: &[S], u: &[S], dim: usize) -> Result<S, DomainError> {
        let out = match self {
            Expr::Const(c) => S::constant(*c, dim),
            Expr::Var(Var::State(i)) => x[*i].clone(),
            Expr::Var(Var::Input(j)) => u[*j].clone(),
            Expr::Neg(a) => a.eval_generic(x, u, dim)?.negate(),
            Expr::Call(func, a) => {
                let a = a.eval_generic(x, u, dim)?;
                let t = a.value();
                match func {
                    Func::Ln => {
                        if t <= 0.0 {
                            return Err(DomainError::LogOfNonPositive(t));
                        }
                        a.chain(t.ln(), 1.0 / t, -1.0 / (t * t))
                    }
                    Func::Exp => {
                        let e = t.exp();
                        a.chain(e, e, e)
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                if *op == BinOp::Pow {
                    if let Some(c) = b.constant_value() {
                        let base = a.eval_generic(x, u, dim)?;
                        return finite(powf_const(base, c)?);
                    }
                }
                let a = a.eval_generic(x, u, dim)?;
                let b = b.eval_generic(x, u, dim)?;
                match op {
                    BinOp::Add => a.plus(&b),
                    BinOp::Sub => a.minus(&b),
                    BinOp::Mul => a.times(&b),
                    BinOp::Div => {
                        let t = b.value();
                        if t == 0.0 {
                            return Err(DomainError::DivisionByZero);
                        }
                        a.times(&b.chain(1.0 / t, -1.0 / (t * t), 2.0 / (t * t * t)))
                    }
                    BinOp::Pow => {
                        // a^b = exp(b ln a) for a non-constant exponent
                        let base = a.value();
                        if base <= 0.0 {
                            return Err(DomainError::NonPositiveBase {
                                base,
                                exponent: b.value(),
                            });
                        }
                        let ln_a = a.chain(base.ln(), 1.0 / base, -1.0 / (base * base));
                        let prod = b.times(&ln_a);
                        let e = prod.value().exp();
                        prod.chain(e, e, e)
                    }
                }
            }
        };
        finite(out)
    }

    fn check_point(&self, x: &[f64], u: &[f64]) -> Result<(), DomainError> {
        let (n, m) = self.max_indices();
        if x.len() < n || u.len() < m {
            return Err(DomainError::Dimension {
                n,
                m,
                got_n: x.len(),
                got_m: u.len(),
            });
        }
        Ok(())
    }

    /// Plain value at `(x, u)`.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<f64, DomainError> {
        self.check_point(x, u)?;
        self.eval_generic(x, u, 0)
    }

    /// Value and gradient with respect to the stacked `(x, u)`.
    pub fn eval_jet1(&self, x: &[f64], u: &[f64]) -> Result<Jet1, DomainError> {
        self.check_point(x, u)?;
        let dim = x.len() + u.len();
        let (xs, us) = seeds::<Jet1>(x, u);
        self.eval_generic(&xs, &us, dim)
    }

    /// Value, gradient and Hessian with respect to the stacked `(x, u)`.
    pub fn eval_jet2(&self, x: &[f64], u: &[f64]) -> Result<Jet2, DomainError> {
        self.check_point(x, u)?;
        let dim = x.len() + u.len();
        let (xs, us) = seeds::<Jet2>(x, u);
        self.eval_generic(&xs, &us, dim)
    }
}

/// Free-function form of [`Expr::eval_jet2`].
pub fn eval_jet2(e: &Expr, x: &[f64], u: &[f64]) -> Result<Jet2, DomainError> {
    e.eval_jet2(x, u)
}

fn seeds<S: Number>(x: &[f64], u: &[f64]) -> (Vec<S>, Vec<S>) {
    let n = x.len();
    let dim = n + u.len();
    let xs = x
        .iter()
        .enumerate()
        .map(|(i, &v)| S::variable(v, i, dim))
        .collect();
    let us = u
        .iter()
        .enumerate()
        .map(|(j, &v)| S::variable(v, n + j, dim))
        .collect();
    (xs, us)
}

fn finite<S: Number>(s: S) -> Result<S, DomainError> {
    if s.is_finite() {
        Ok(s)
    } else {
        Err(DomainError::NonFinite)
    }
}

fn powf_const<S: Number>(base: S, c: f64) -> Result<S, DomainError> {
    let t = base.value();
    if c.fract() == 0.0 && c.abs() < 1e9 {
        let k = c as i32;
        if k == 0 {
            return Ok(base.chain(1.0, 0.0, 0.0));
        }
        if t == 0.0 && k < 0 {
            return Err(DomainError::ZeroToNegativePower(c));
        }
        let kf = f64::from(k);
        let f1 = kf * t.powi(k - 1);
        let f2 = if k == 1 { 0.0 } else { kf * (kf - 1.0) * t.powi(k - 2) };
        return Ok(base.chain(t.powi(k), f1, f2));
    }
    if t <= 0.0 {
        return Err(DomainError::NonPositiveBase { base: t, exponent: c });
    }
    let v = t.powf(c);
    Ok(base.chain(v, c * v / t, c * (c - 1.0) * v / (t * t)))
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Binary(BinOp::Add, Box::new(self), Box::new(rhs))
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Binary(BinOp::Sub, Box::new(self), Box::new(rhs))
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Binary(BinOp::Mul, Box::new(self), Box::new(rhs))
    }
}

impl Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Binary(BinOp::Div, Box::new(self), Box::new(rhs))
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

// Binding strength used by the printer. Unary minus sits at the `base` level.
fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Binary(BinOp::Pow, ..) => 3,
        Expr::Neg(_) => 4,
        Expr::Const(c) if c.is_sign_negative() => 3,
        _ => 5,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if precedence(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "-{:?}", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(Var::State(i)) => write!(f, "x{}", i + 1),
            Expr::Var(Var::Input(j)) => write!(f, "u{}", j + 1),
            Expr::Neg(a) => {
                f.write_str("-")?;
                write_child(f, a, 4)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Binary(op, a, b) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 4, 3),
                };
                write_child(f, a, lp)?;
                f.write_str(sym)?;
                write_child(f, b, rp)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p(s: &str, n: usize, m: usize) -> Expr {
        parse_expression(s, n, m).unwrap()
    }

    #[test]
    fn monomial_jet() {
        let j = p("x1^2", 1, 0).eval_jet2(&[3.0], &[]).unwrap();
        assert_eq!(j.value, 9.0);
        assert_eq!(j.grad, vec![6.0]);
        assert_eq!(j.hess()[(0, 0)], 2.0);
    }

    #[test]
    fn integer_powers_of_negative_base() {
        let j = p("u1^3", 0, 1).eval_jet2(&[], &[-2.0]).unwrap();
        assert_eq!(j.value, -8.0);
        assert_eq!(j.grad[0], 12.0);
        assert_eq!(j.hess()[(0, 0)], -12.0);
        // integer exponent given as a constant subexpression
        let j = p("x1^(4/2)", 1, 0).eval_jet2(&[-3.0], &[]).unwrap();
        assert_eq!(j.value, 9.0);
    }

    #[test]
    fn fractional_power_domain() {
        let e = p("x1^0.34", 1, 0);
        assert!(matches!(
            e.eval(&[0.0], &[]),
            Err(DomainError::NonPositiveBase { .. })
        ));
        assert!(matches!(
            e.eval(&[-1.0], &[]),
            Err(DomainError::NonPositiveBase { .. })
        ));
        let j = e.eval_jet2(&[2.0], &[]).unwrap();
        assert_abs_diff_eq!(j.value, 2f64.powf(0.34), epsilon = 1e-15);
        assert_abs_diff_eq!(j.grad[0], 0.34 * 2f64.powf(-0.66), epsilon = 1e-15);
        assert_abs_diff_eq!(j.hess()[(0, 0)], 0.34 * -0.66 * 2f64.powf(-1.66), epsilon = 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            p("ln(x1)", 1, 0).eval(&[0.0], &[]),
            Err(DomainError::LogOfNonPositive(_))
        ));
        assert_eq!(
            p("1/x1", 1, 0).eval(&[0.0], &[]),
            Err(DomainError::DivisionByZero)
        );
        assert!(matches!(
            p("x1^(-2)", 1, 0).eval(&[0.0], &[]),
            Err(DomainError::ZeroToNegativePower(_))
        ));
        assert_eq!(
            p("exp(x1)", 1, 0).eval(&[1000.0], &[]),
            Err(DomainError::NonFinite)
        );
    }

    #[test]
    fn zero_power_is_one() {
        let j = p("x1^0", 1, 0).eval_jet2(&[0.0], &[]).unwrap();
        assert_eq!(j.value, 1.0);
        assert_eq!(j.grad, vec![0.0]);
    }

    #[test]
    fn variable_exponent() {
        // x^u = exp(u ln x)
        let j = p("x1^u1", 1, 1).eval_jet2(&[2.0], &[3.0]).unwrap();
        assert_abs_diff_eq!(j.value, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j.grad[0], 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j.grad[1], 8.0 * 2f64.ln(), epsilon = 1e-12);
        // d2/dxdu x^u = x^(u-1) (1 + u ln x)
        assert_abs_diff_eq!(j.hess()[(0, 1)], 4.0 * (1.0 + 3.0 * 2f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn polynomial_degree() {
        assert_eq!(p("2*x1^2 + 0.0001*u1^2", 1, 1).polynomial_degree(), Some(2));
        assert_eq!(p("(x1-1)^2", 1, 0).polynomial_degree(), Some(2));
        assert_eq!(p("x1*u1/2 + ln(3)", 1, 1).polynomial_degree(), Some(2));
        assert_eq!(p("x1^3 - 2*x1^2 + u1", 1, 1).polynomial_degree(), Some(3));
        assert_eq!(p("ln(x1)", 1, 0).polynomial_degree(), None);
        assert_eq!(p("1/x1", 1, 0).polynomial_degree(), None);
        assert_eq!(p("x1^0.5", 1, 0).polynomial_degree(), None);
    }

    #[test]
    fn display_reparses() {
        for s in [
            "2*x1^2 + 0.0001*u1^2",
            "ln(5*x1^0.34 - u1)",
            "-ln(3*x1^0.2 - u1)",
            "x1 - (u1 - x1)",
            "x1/(u1*x1)",
            "2^3^2",
            "(2^3)^2",
            "(-x1)^2",
            "-(x1^2)",
            "--x1",
            "1e-20*x1 + 1e300",
        ] {
            let e = p(s, 1, 1);
            let printed = e.to_string();
            assert_eq!(p(&printed, 1, 1), e, "{s} -> {printed}");
        }
    }

    #[test]
    fn builder_ops() {
        let e = Expr::constant(2.0) * Expr::state(0).powf(2.0) - Expr::input(0);
        assert_eq!(e.eval(&[3.0], &[1.0]).unwrap(), 17.0);
        assert_eq!(e, p("2*x1^2 - u1", 1, 1));
    }
}
