//! Small dense linear algebra: cyclic Jacobi eigen-decomposition of symmetric
//! matrices plus a few helpers used across the crate.

use nalgebra::{DMatrix, DVector};

/// Off-diagonal tolerance (relative to the Frobenius norm) at which the
/// Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-13;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are sorted
/// ascending and `vectors` holds the matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::INFINITY)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn min_vector(&self) -> DVector<f64> {
        self.vectors.column(0).into_owned()
    }

    pub fn max_vector(&self) -> DVector<f64> {
        self.vectors.column(self.values.len() - 1).into_owned()
    }
}

/// Cyclic Jacobi rotations on a symmetric matrix. Only the upper triangle of
/// `a` is read.
pub fn sym_eigen(a: &DMatrix<f64>) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut s = DMatrix::from_fn(n, n, |i, j| if i <= j { a[(i, j)] } else { a[(j, i)] });
    let mut v = DMatrix::<f64>::identity(n, n);

    let scale = s.norm().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for q in 1..n {
            for p in 0..q {
                off += s[(p, q)] * s[(p, q)];
            }
        }
        if off.sqrt() <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // S <- Jᵀ S J
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[(p, k)];
                    let sqk = s[(q, k)];
                    s[(p, k)] = c * spk - sn * sqk;
                    s[(q, k)] = sn * spk + c * sqk;
                }
                s[(p, q)] = 0.0;
                s[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]));
    let values = order.iter().map(|&i| s[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    SymEigen { values, vectors }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigen(a).min()
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigen(a).max()
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest modulus among the eigenvalues of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Singular values of a (possibly rectangular) matrix, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    // eigenvalues of the smaller Gram matrix
    let g = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let mut s: Vec<f64> = sym_eigen(&g).values.iter().map(|l| l.max(0.0).sqrt()).collect();
    s.reverse();
    s
}

/// Orthonormal basis of the null space of `a` (columns), computed from the
/// eigenvectors of `aᵀa` whose eigenvalues fall below `rel_tol` times the
/// largest.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    let g = a.transpose() * a;
    let eig = sym_eigen(&g);
    let top = eig.max().max(0.0);
    let keep: Vec<usize> = (0..cols)
        .filter(|&k| eig.values[k] <= rel_tol * rel_tol * top.max(1.0))
        .collect();
    DMatrix::from_fn(cols, keep.len(), |r, c| eig.vectors[(r, keep[c])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn diagonal_and_2x2() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = sym_eigen(&a);
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.values[1], 3.0, epsilon = 1e-14);
        let v = e.min_vector();
        assert_abs_diff_eq!((v[0] + v[1]).abs(), 0.0, epsilon = 1e-14);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        assert_eq!(sym_eigen(&d).values, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert_abs_diff_eq!(spectral_radius(&a), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn null_space_of_row() {
        let a = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let z = null_space(&a, 1e-8);
        assert_eq!(z.ncols(), 1);
        assert_abs_diff_eq!((&a * &z).norm(), 0.0, epsilon = 1e-14);
        let zero = DMatrix::zeros(1, 2);
        assert_eq!(null_space(&zero, 1e-8).ncols(), 2);
    }

    proptest! {
        #[test]
        fn reconstructs_random_symmetric(entries in prop::collection::vec(-10.0f64..10.0, 25)) {
            let m = DMatrix::from_row_slice(5, 5, &entries);
            let a = symmetrize(&m);
            let e = sym_eigen(&a);
            let d = DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
            let rec = &e.vectors * d * e.vectors.transpose();
            prop_assert!((rec - &a).norm() <= 1e-12 * (1.0 + a.norm()));
            let orth = e.vectors.transpose() * &e.vectors - DMatrix::identity(5, 5);
            prop_assert!(orth.norm() <= 1e-12);
            for w in e.values.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
