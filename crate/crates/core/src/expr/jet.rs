use nalgebra::{DMatrix, DVector};

/// Arithmetic needed by the expression evaluator. Domain checks happen in the
/// evaluator on `value()`, so implementations never see invalid arguments.
pub(crate) trait Number: Clone + Sized {
    fn constant(c: f64, dim: usize) -> Self;
    fn variable(value: f64, index: usize, dim: usize) -> Self;
    fn value(&self) -> f64;
    fn is_finite(&self) -> bool;
    fn plus(&self, rhs: &Self) -> Self;
    fn minus(&self, rhs: &Self) -> Self;
    fn times(&self, rhs: &Self) -> Self;
    fn negate(&self) -> Self;
    /// Compose with a scalar function `g` given `g(v)`, `g'(v)` and `g''(v)`.
    fn chain(&self, g0: f64, g1: f64, g2: f64) -> Self;
}

impl Number for f64 {
    fn constant(c: f64, _dim: usize) -> Self {
        c
    }
    fn variable(value: f64, _index: usize, _dim: usize) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn plus(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn minus(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn times(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn negate(&self) -> Self {
        -self
    }
    fn chain(&self, g0: f64, _g1: f64, _g2: f64) -> Self {
        g0
    }
}

/// Value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet1 {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Number for Jet1 {
    fn constant(c: f64, dim: usize) -> Self {
        Jet1 {
            value: c,
            grad: vec![0.0; dim],
        }
    }
    fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut grad = vec![0.0; dim];
        grad[index] = 1.0;
        Jet1 { value, grad }
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
    fn plus(&self, rhs: &Self) -> Self {
        Jet1 {
            value: self.value + rhs.value,
            grad: zip_map(&self.grad, &rhs.grad, |a, b| a + b),
        }
    }
    fn minus(&self, rhs: &Self) -> Self {
        Jet1 {
            value: self.value - rhs.value,
            grad: zip_map(&self.grad, &rhs.grad, |a, b| a - b),
        }
    }
    fn times(&self, rhs: &Self) -> Self {
        let (a, b) = (self.value, rhs.value);
        Jet1 {
            value: a * b,
            grad: zip_map(&self.grad, &rhs.grad, |ga, gb| a * gb + b * ga),
        }
    }
    fn negate(&self) -> Self {
        Jet1 {
            value: -self.value,
            grad: self.grad.iter().map(|g| -g).collect(),
        }
    }
    fn chain(&self, g0: f64, g1: f64, _g2: f64) -> Self {
        Jet1 {
            value: g0,
            grad: self.grad.iter().map(|g| g1 * g).collect(),
        }
    }
}

/// Truncated second-order jet: value, gradient and Hessian of a scalar with
/// respect to the stacked variable `(x, u)`.
///
/// The Hessian is stored once per unordered index pair, so the matrix returned
/// by [`Jet2::hess`] is symmetric bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: Vec<f64>,
    // upper triangle, column-major: (i, j) with i <= j at j*(j+1)/2 + i
    packed: Vec<f64>,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

impl Jet2 {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_entry(&self, i: usize, j: usize) -> f64 {
        self.packed[tri(i, j)]
    }

    pub fn hess(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.packed[tri(i, j)])
    }

    pub fn grad_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.grad)
    }

    /// Linear combination `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Jet2, b: f64) -> Jet2 {
        Jet2 {
            value: a * self.value + b * other.value,
            grad: zip_map(&self.grad, &other.grad, |x, y| a * x + b * y),
            packed: zip_map(&self.packed, &other.packed, |x, y| a * x + b * y),
        }
    }
}

impl Number for Jet2 {
    fn constant(c: f64, dim: usize) -> Self {
        Jet2 {
            value: c,
            grad: vec![0.0; dim],
            packed: vec![0.0; dim * (dim + 1) / 2],
        }
    }
    fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut j = Self::constant(value, dim);
        j.grad[index] = 1.0;
        j
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|g| g.is_finite())
            && self.packed.iter().all(|h| h.is_finite())
    }
    fn plus(&self, rhs: &Self) -> Self {
        self.axpby(1.0, rhs, 1.0)
    }
    fn minus(&self, rhs: &Self) -> Self {
        Jet2 {
            value: self.value - rhs.value,
            grad: zip_map(&self.grad, &rhs.grad, |a, b| a - b),
            packed: zip_map(&self.packed, &rhs.packed, |a, b| a - b),
        }
    }
    fn times(&self, rhs: &Self) -> Self {
        let (a, b) = (self.value, rhs.value);
        let d = self.dim();
        let mut packed = Vec::with_capacity(self.packed.len());
        for j in 0..d {
            for i in 0..=j {
                let k = tri(i, j);
                packed.push(
                    a * rhs.packed[k]
                        + b * self.packed[k]
                        + (self.grad[i] * rhs.grad[j] + rhs.grad[i] * self.grad[j]),
                );
            }
        }
        Jet2 {
            value: a * b,
            grad: zip_map(&self.grad, &rhs.grad, |ga, gb| a * gb + b * ga),
            packed,
        }
    }
    fn negate(&self) -> Self {
        Jet2 {
            value: -self.value,
            grad: self.grad.iter().map(|g| -g).collect(),
            packed: self.packed.iter().map(|h| -h).collect(),
        }
    }
    fn chain(&self, g0: f64, g1: f64, g2: f64) -> Self {
        let d = self.dim();
        let mut packed = Vec::with_capacity(self.packed.len());
        for j in 0..d {
            for i in 0..=j {
                packed.push(g1 * self.packed[tri(i, j)] + g2 * (self.grad[i] * self.grad[j]));
            }
        }
        Jet2 {
            value: g0,
            grad: self.grad.iter().map(|g| g1 * g).collect(),
            packed,
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
