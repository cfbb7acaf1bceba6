//! Multiobjective optimal control problems: dynamics `x⁺ = f(x, u)`, `k ≥ 2`
//! stage costs, box constraints and inequality constraints `g(x, u) ≤ 0`.
//!
//! Problem files are line oriented, `#` starts a comment:
//!
//! ```text
//! [dims] n=1 m=1
//! [dynamics]
//! f1 = x1^3 - 2*x1^2 + u1
//! [cost 1]
//! l = -ln(5*x1^0.34 - u1)
//! [cost 2]
//! l = -ln(3*x1^0.2 - u1)
//! [constraints]
//! x1 in [0, 10]
//! u1 in [0.1, 5]
//! [constraints.g]
//! g1 = x1 + u1 - 12
//! ```

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::expr::{parse_expression, DomainError, Expr, Jet1, Jet2, ParseError};
use crate::linalg::min_eigenvalue;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Expression {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("line {line}: empty box for {var}: [{lo}, {hi}]")]
    EmptyBox {
        line: usize,
        var: String,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WeightError {
    #[error("weight {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    Sum(f64),
    #[error("expected {expected} weights, got {got}")]
    Length { expected: usize, got: usize },
}

/// Closed interval, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const FREE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn is_free(&self) -> bool {
        self.lo == f64::NEG_INFINITY && self.hi == f64::INFINITY
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn slack(&self, v: f64) -> f64 {
        (v - self.lo).min(self.hi - v)
    }
}

/// Convex weights `μ` with `μᵢ ∈ [0, 1]` and `Σ μᵢ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(mu: Vec<f64>) -> Result<Self, WeightError> {
        for (index, &value) in mu.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(WeightError::OutOfRange { index, value });
            }
        }
        let sum: f64 = mu.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(WeightError::Sum(sum));
        }
        Ok(Weights(mu))
    }

    /// `(μ, 1 − μ)` for two costs.
    pub fn pair(mu: f64) -> Result<Self, WeightError> {
        Weights::new(vec![mu, 1.0 - mu])
    }

    /// The `i`-th unit weight among `k` costs.
    pub fn unit(i: usize, k: usize) -> Self {
        let mut mu = vec![0.0; k];
        mu[i] = 1.0;
        Weights(mu)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The weight on the first cost, the scalar `μ` of the two-cost case.
    pub fn first(&self) -> f64 {
        self.0[0]
    }

    /// Index of the cost carrying all the weight, if any.
    pub fn vertex(&self) -> Option<usize> {
        self.0.iter().position(|&w| w == 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub n: usize,
    pub m: usize,
    pub dynamics: Vec<Expr>,
    pub costs: Vec<Expr>,
    pub state_bounds: Vec<Interval>,
    pub input_bounds: Vec<Interval>,
    /// `g(x, u) ≤ 0`.
    pub inequalities: Vec<Expr>,
}

impl Problem {
    /// Build and validate a problem without box or inequality constraints.
    pub fn new(n: usize, m: usize, dynamics: Vec<Expr>, costs: Vec<Expr>) -> Result<Self, ProblemError> {
        let p = Problem {
            n,
            m,
            dynamics,
            costs,
            state_bounds: vec![Interval::FREE; n],
            input_bounds: vec![Interval::FREE; m],
            inequalities: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_bounds(mut self, state: Vec<Interval>, input: Vec<Interval>) -> Result<Self, ProblemError> {
        self.state_bounds = state;
        self.input_bounds = input;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        let dim = |msg: String| Err(ProblemError::Dimension(msg));
        if self.n == 0 {
            return dim("n must be at least 1".into());
        }
        if self.dynamics.len() != self.n {
            return dim(format!("{} dynamics components for n={}", self.dynamics.len(), self.n));
        }
        if self.costs.len() < 2 {
            return dim(format!("need at least 2 costs, got {}", self.costs.len()));
        }
        if self.state_bounds.len() != self.n || self.input_bounds.len() != self.m {
            return dim("box constraint count does not match (n, m)".into());
        }
        for e in self.dynamics.iter().chain(&self.costs).chain(&self.inequalities) {
            let (n, m) = e.max_indices();
            if n > self.n || m > self.m {
                return dim(format!("expression `{e}` exceeds (n={}, m={})", self.n, self.m));
            }
        }
        for (k, b) in self.state_bounds.iter().chain(&self.input_bounds).enumerate() {
            if !(b.lo <= b.hi) {
                return Err(ProblemError::EmptyBox {
                    line: 0,
                    var: self.var_name(k),
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
        Ok(())
    }

    pub fn num_costs(&self) -> usize {
        self.costs.len()
    }

    /// `n + m`.
    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    /// Name of the stacked coordinate `k` of `(x, u)`.
    pub fn var_name(&self, k: usize) -> String {
        if k < self.n {
            format!("x{}", k + 1)
        } else {
            format!("u{}", k - self.n + 1)
        }
    }

    /// Box constraints on the stacked `(x, u)`.
    pub fn bounds(&self) -> Vec<Interval> {
        self.state_bounds.iter().chain(&self.input_bounds).copied().collect()
    }

    pub fn is_unconstrained(&self) -> bool {
        self.inequalities.is_empty() && self.bounds().iter().all(Interval::is_free)
    }

    /// Every coordinate of `(x, u)` has a finite box.
    pub fn is_bounded(&self) -> bool {
        self.bounds().iter().all(Interval::is_bounded)
    }

    pub fn has_linear_dynamics(&self) -> bool {
        self.dynamics.iter().all(|f| matches!(f.polynomial_degree(), Some(d) if d <= 1))
    }

    pub fn eval_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DomainError> {
        self.dynamics.iter().map(|f| f.eval(x, u)).collect()
    }

    pub fn dynamics_jet1(&self, x: &[f64], u: &[f64]) -> Result<Vec<Jet1>, DomainError> {
        self.dynamics.iter().map(|f| f.eval_jet1(x, u)).collect()
    }

    pub fn dynamics_jet2(&self, x: &[f64], u: &[f64]) -> Result<Vec<Jet2>, DomainError> {
        self.dynamics.iter().map(|f| f.eval_jet2(x, u)).collect()
    }

    /// `(x, u) ∈ 𝕐` up to `tol`. Points where `g` cannot be evaluated are
    /// outside.
    pub fn contains(&self, x: &[f64], u: &[f64], tol: f64) -> bool {
        let in_box = x.iter().zip(&self.state_bounds).all(|(v, b)| b.contains(*v, tol))
            && u.iter().zip(&self.input_bounds).all(|(v, b)| b.contains(*v, tol));
        in_box
            && self
                .inequalities
                .iter()
                .all(|g| matches!(g.eval(x, u), Ok(v) if v <= tol))
    }

    /// `x ∈ 𝕏` as induced by the state box.
    pub fn state_admissible(&self, x: &[f64], tol: f64) -> bool {
        x.iter().zip(&self.state_bounds).all(|(v, b)| b.contains(*v, tol))
    }

    /// Smallest constraint slack at `(x, u)`: distance to the nearest box face
    /// and `-g`. Infinite when there are no constraints.
    pub fn slack(&self, x: &[f64], u: &[f64]) -> f64 {
        let boxes = x
            .iter()
            .zip(&self.state_bounds)
            .chain(u.iter().zip(&self.input_bounds))
            .map(|(v, b)| b.slack(*v));
        let ineq = self
            .inequalities
            .iter()
            .map(|g| g.eval(x, u).map(|v| -v).unwrap_or(f64::NEG_INFINITY));
        boxes.chain(ineq).fold(f64::INFINITY, f64::min)
    }

    /// Weighted cost `ℓ_μ = Σ μᵢ ℓᵢ`. Zero-weight costs are left out so their
    /// domains do not restrict `ℓ_μ`.
    pub fn combine_costs(&self, w: &Weights) -> Result<Expr, WeightError> {
        combine_costs(self, w)
    }

    pub fn extract_lq(&self) -> Result<LqStructure, NotLq> {
        extract_lq(self)
    }
}

/// `ℓ_μ = Σ μᵢ ℓᵢ`; terms with `μᵢ = 0` are dropped.
pub fn combine_costs(p: &Problem, w: &Weights) -> Result<Expr, WeightError> {
    if w.len() != p.costs.len() {
        return Err(WeightError::Length {
            expected: p.costs.len(),
            got: w.len(),
        });
    }
    if let Some(i) = w.vertex() {
        return Ok(p.costs[i].clone());
    }
    let combined = w
        .as_slice()
        .iter()
        .zip(&p.costs)
        .filter(|(mu, _)| **mu != 0.0)
        .map(|(&mu, l)| Expr::constant(mu) * l.clone())
        .reduce(|a, b| a + b)
        .unwrap_or(Expr::Const(0.0));
    Ok(combined)
}

/// `ℓ(x, u) = xᵀQx + uᵀRu + sᵀx + vᵀu + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DVector<f64>,
    /// Constant term, dropped from `Q, R, s, v`.
    pub offset: f64,
}

impl QuadraticCost {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[0]
            + (u.transpose() * &self.r * u)[0]
            + self.s.dot(x)
            + self.v.dot(u)
            + self.offset
    }

    /// `Σ μᵢ (Qᵢ, Rᵢ, sᵢ, vᵢ, offsetᵢ)`.
    pub fn combine(costs: &[QuadraticCost], w: &[f64]) -> QuadraticCost {
        let mut out = QuadraticCost {
            q: costs[0].q.clone() * 0.0,
            r: costs[0].r.clone() * 0.0,
            s: costs[0].s.clone() * 0.0,
            v: costs[0].v.clone() * 0.0,
            offset: 0.0,
        };
        for (c, &mu) in costs.iter().zip(w) {
            out.q += &c.q * mu;
            out.r += &c.r * mu;
            out.s += &c.s * mu;
            out.v += &c.v * mu;
            out.offset += mu * c.offset;
        }
        out
    }
}

/// Linear dynamics `x⁺ = Ax + Bu` with generalised quadratic costs.
#[derive(Debug, Clone, PartialEq)]
pub struct LqStructure {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub costs: Vec<QuadraticCost>,
}

impl LqStructure {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_scalar(&self) -> bool {
        self.n() == 1 && self.m() == 1
    }
}

/// Why a problem is not linear-quadratic.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("not linear-quadratic: {0}")]
pub struct NotLq(pub String);

/// Read off `(A, B, Qᵢ, Rᵢ, sᵢ, vᵢ)` when every `fᵢ` is linear without a
/// constant term and every cost is a quadratic polynomial without `x`-`u`
/// cross terms, `Qᵢ ⪰ 0` and `Rᵢ ≻ 0`.
pub fn extract_lq(p: &Problem) -> Result<LqStructure, NotLq> {
    let (n, m) = (p.n, p.m);
    let zx = vec![0.0; n];
    let zu = vec![0.0; m];
    let origin = |e: &Expr| {
        e.eval_jet2(&zx, &zu)
            .map_err(|err| NotLq(format!("`{e}` not evaluable at the origin: {err}")))
    };

    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for (i, f) in p.dynamics.iter().enumerate() {
        if !matches!(f.polynomial_degree(), Some(d) if d <= 1) {
            return Err(NotLq(format!("dynamics f{} = `{f}` is not linear", i + 1)));
        }
        let j = origin(f)?;
        if j.value.abs() > 1e-14 {
            return Err(NotLq(format!("dynamics f{} has constant term {}", i + 1, j.value)));
        }
        for k in 0..n {
            a[(i, k)] = j.grad[k];
        }
        for k in 0..m {
            b[(i, k)] = j.grad[n + k];
        }
    }

    let mut costs = Vec::with_capacity(p.costs.len());
    for (i, l) in p.costs.iter().enumerate() {
        if !matches!(l.polynomial_degree(), Some(d) if d <= 2) {
            return Err(NotLq(format!("cost {} = `{l}` is not quadratic", i + 1)));
        }
        let j = origin(l)?;
        let h = j.hess();
        if (0..n).any(|r| (0..m).any(|c| h[(r, n + c)] != 0.0)) {
            return Err(NotLq(format!("cost {} has x-u cross terms", i + 1)));
        }
        let q = h.view((0, 0), (n, n)) * 0.5;
        let r = h.view((n, n), (m, m)) * 0.5;
        if n > 0 && min_eigenvalue(&q) < -1e-10 {
            return Err(NotLq(format!("cost {}: Q is not positive semidefinite", i + 1)));
        }
        if m > 0 && min_eigenvalue(&r) <= 0.0 {
            return Err(NotLq(format!("cost {}: R is not positive definite", i + 1)));
        }
        costs.push(QuadraticCost {
            q,
            r,
            s: DVector::from_column_slice(&j.grad[..n]),
            v: DVector::from_column_slice(&j.grad[n..]),
            offset: j.value,
        });
    }
    Ok(LqStructure { a, b, costs })
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Dims,
    Dynamics,
    Cost(usize),
    Constraints,
    Inequalities,
}

/// Parse a problem file.
pub fn load_problem(text: &str) -> Result<Problem, ProblemError> {
    let perr = |line: usize, message: String| ProblemError::Parse { line, message };

    let mut dims: Option<(usize, usize)> = None;
    let mut section = Section::None;
    let mut dynamics: Vec<(usize, usize, String)> = Vec::new();
    let mut costs: Vec<(usize, Option<(usize, String)>)> = Vec::new();
    let mut bounds: Vec<(usize, String, f64, f64)> = Vec::new();
    let mut ineqs: Vec<(usize, usize, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let close = content
                .find(']')
                .ok_or_else(|| perr(line, "unterminated section header".into()))?;
            let header = content[1..close].trim();
            section = match header {
                "dims" => Section::Dims,
                "dynamics" => Section::Dynamics,
                "constraints" => Section::Constraints,
                "constraints.g" => Section::Inequalities,
                h if h.starts_with("cost") => {
                    let k: usize = h[4..]
                        .trim()
                        .parse()
                        .map_err(|_| perr(line, format!("bad cost header `[{h}]`")))?;
                    if k != costs.len() + 1 {
                        return Err(perr(line, format!("expected [cost {}], got [cost {k}]", costs.len() + 1)));
                    }
                    costs.push((line, None));
                    Section::Cost(k)
                }
                h => return Err(perr(line, format!("unknown section `[{h}]`"))),
            };
            content = content[close + 1..].trim();
            if content.is_empty() {
                continue;
            }
        }

        match section {
            Section::None => return Err(perr(line, "content before the first section".into())),
            Section::Dims => {
                let (mut n, mut m) = dims.unwrap_or((usize::MAX, usize::MAX));
                for tok in content.split_whitespace() {
                    let (key, val) = tok
                        .split_once('=')
                        .ok_or_else(|| perr(line, format!("expected key=value, got `{tok}`")))?;
                    let val: usize = val
                        .trim()
                        .parse()
                        .map_err(|_| perr(line, format!("bad integer `{val}`")))?;
                    match key.trim() {
                        "n" => n = val,
                        "m" => m = val,
                        k => return Err(perr(line, format!("unknown dimension `{k}`"))),
                    }
                }
                dims = Some((n, m));
            }
            Section::Dynamics | Section::Inequalities => {
                let (key, rhs) = content
                    .split_once('=')
                    .ok_or_else(|| perr(line, "expected `name = expression`".into()))?;
                let key = key.trim();
                let prefix = if section == Section::Dynamics { 'f' } else { 'g' };
                let index: usize = key
                    .strip_prefix(prefix)
                    .and_then(|s| s.parse().ok())
                    .filter(|&i| i >= 1)
                    .ok_or_else(|| perr(line, format!("expected `{prefix}<index>`, got `{key}`")))?;
                let offset = rhs.as_ptr() as usize - raw.as_ptr() as usize;
                let entry = (line, index, " ".repeat(offset) + rhs);
                if section == Section::Dynamics {
                    dynamics.push(entry);
                } else {
                    ineqs.push(entry);
                }
            }
            Section::Cost(k) => {
                let (key, rhs) = content
                    .split_once('=')
                    .ok_or_else(|| perr(line, "expected `l = expression`".into()))?;
                if key.trim() != "l" {
                    return Err(perr(line, format!("expected `l`, got `{}`", key.trim())));
                }
                if costs[k - 1].1.is_some() {
                    return Err(perr(line, format!("cost {k} defined twice")));
                }
                let offset = rhs.as_ptr() as usize - raw.as_ptr() as usize;
                costs[k - 1].1 = Some((line, " ".repeat(offset) + rhs));
            }
            Section::Constraints => {
                let (var, range) = content
                    .split_once(" in ")
                    .ok_or_else(|| perr(line, "expected `<var> in [lo, hi]`".into()))?;
                let range = range.trim();
                let inner = range
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| perr(line, format!("expected `[lo, hi]`, got `{range}`")))?;
                let (lo, hi) = inner
                    .split_once(',')
                    .ok_or_else(|| perr(line, "expected `[lo, hi]`".into()))?;
                let num = |s: &str| -> Result<f64, ProblemError> {
                    match s.trim() {
                        "inf" | "+inf" => Ok(f64::INFINITY),
                        "-inf" => Ok(f64::NEG_INFINITY),
                        t => t.parse().map_err(|_| perr(line, format!("bad bound `{t}`"))),
                    }
                };
                bounds.push((line, var.trim().to_string(), num(lo)?, num(hi)?));
            }
        }
    }

    let (n, m) = dims.ok_or_else(|| perr(0, "missing [dims] section".into()))?;
    if n == usize::MAX || m == usize::MAX {
        return Err(perr(0, "[dims] must set both n and m".into()));
    }

    let parse_at = |line: usize, text: &str| {
        parse_expression(text, n, m).map_err(|source| ProblemError::Expression { line, source })
    };

    let mut f: Vec<Option<Expr>> = vec![None; n];
    for (line, index, rhs) in &dynamics {
        if *index > n {
            return Err(ProblemError::Dimension(format!(
                "line {line}: f{index} declared but n={n}"
            )));
        }
        if f[index - 1].is_some() {
            return Err(perr(*line, format!("f{index} defined twice")));
        }
        f[index - 1] = Some(parse_at(*line, rhs)?);
    }
    let dynamics = f
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| ProblemError::Dimension(format!("missing dynamics component f{}", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;

    let costs = costs
        .into_iter()
        .enumerate()
        .map(|(i, (hline, c))| match c {
            Some((line, rhs)) => parse_at(line, &rhs),
            None => Err(perr(hline, format!("cost {} has no `l = ...` line", i + 1))),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut state_bounds = vec![Interval::FREE; n];
    let mut input_bounds = vec![Interval::FREE; m];
    for (line, var, lo, hi) in bounds {
        let e = parse_at(line, &var)?;
        let slot = match e {
            Expr::Var(crate::expr::Var::State(i)) => &mut state_bounds[i],
            Expr::Var(crate::expr::Var::Input(j)) => &mut input_bounds[j],
            _ => return Err(perr(line, format!("`{var}` is not a variable"))),
        };
        if !(lo <= hi) {
            return Err(ProblemError::EmptyBox { line, var, lo, hi });
        }
        *slot = Interval::new(lo, hi);
    }

    let mut inequalities = Vec::with_capacity(ineqs.len());
    ineqs.sort_by_key(|(_, i, _)| *i);
    for (line, _, rhs) in &ineqs {
        inequalities.push(parse_at(*line, rhs)?);
    }

    let p = Problem {
        n,
        m,
        dynamics,
        costs,
        state_bounds,
        input_bounds,
        inequalities,
    };
    p.validate()?;
    Ok(p)
}
