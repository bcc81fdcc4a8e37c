//! Dense Lyapunov equation solver.
//!
//! Solves A X + X Aᵀ + W = 0 for symmetric W by the Bartels-Stewart scheme:
//! a real Schur decomposition of A followed by block back-substitution on the
//! quasi-triangular factor. Serves as the inner solver for the projected
//! equations and, wrapped with a stability check, as the desk-scale
//! reference oracle.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("dimension mismatch: A is {0}x{0}, W is {1}x{2}")]
    DimensionMismatch(usize, usize, usize),
    #[error("real Schur decomposition did not converge")]
    SchurFailed,
    #[error("singular small block system: eigenvalue pairing lambda_i + lambda_j = 0")]
    SingularSystem,
    #[error("matrix A is not asymptotically stable")]
    UnstableA,
}

/// Solve A X + X Aᵀ + W = 0. W must be symmetric; the result is symmetrized.
pub fn solve_lyapunov_dense(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LyapunovError> {
    LyapSchur::new(a)?.solve(w)
}

/// Real Schur factorization of A cached for repeated Lyapunov solves with
/// the same coefficient matrix.
pub struct LyapSchur {
    u: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl LyapSchur {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, LyapunovError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LyapunovError::DimensionMismatch(n, a.nrows(), a.ncols()));
        }
        if n == 0 {
            return Ok(Self {
                u: DMatrix::zeros(0, 0),
                t: DMatrix::zeros(0, 0),
            });
        }
        let schur = a
            .clone()
            .try_schur(1e-12, 200 * n.max(10))
            .or_else(|| a.clone().try_schur(1e-9, 400 * n.max(10)))
            .ok_or(LyapunovError::SchurFailed)?;
        let (u, t) = schur.unpack();
        Ok(Self { u, t })
    }

    /// Solve A X + X Aᵀ + W = 0 with the cached factorization.
    pub fn solve(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>, LyapunovError> {
        let n = self.u.nrows();
        if w.nrows() != n || w.ncols() != n {
            return Err(LyapunovError::DimensionMismatch(n, w.nrows(), w.ncols()));
        }
        if n == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let c = -(self.u.transpose() * w * &self.u);
        let y = solve_quasi_triangular_lyap(&self.t, &c)?;
        let x = &self.u * y * self.u.transpose();
        Ok((&x + x.transpose()) * 0.5)
    }

    /// Solve Aᵀ X + X A + W = 0 with the same factorization (the transposed
    /// quasi-triangular system is eliminated in mirror order).
    pub fn solve_transposed(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>, LyapunovError> {
        let n = self.u.nrows();
        if w.nrows() != n || w.ncols() != n {
            return Err(LyapunovError::DimensionMismatch(n, w.nrows(), w.ncols()));
        }
        if n == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let c = -(self.u.transpose() * w * &self.u);
        let y = solve_quasi_triangular_lyap_t(&self.t, &c)?;
        let x = &self.u * y * self.u.transpose();
        Ok((&x + x.transpose()) * 0.5)
    }
}

/// Solve T Y + Y Tᵀ = C with T real quasi-upper-triangular.
fn solve_quasi_triangular_lyap(
    t: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LyapunovError> {
    let n = t.nrows();
    // block boundaries: each block is 1x1 or 2x2 depending on the subdiagonal
    let mut starts = Vec::new();
    let mut k = 0;
    while k < n {
        starts.push(k);
        if k + 1 < n && t[(k + 1, k)].abs() > 0.0 {
            k += 2;
        } else {
            k += 1;
        }
    }
    let nb = starts.len();
    let block = |b: usize| -> (usize, usize) {
        let s = starts[b];
        let e = if b + 1 < nb { starts[b + 1] } else { n };
        (s, e - s)
    };
    let mut y = DMatrix::zeros(n, n);
    for bi in (0..nb).rev() {
        let (i0, ni) = block(bi);
        for bj in (0..nb).rev() {
            let (j0, nj) = block(bj);
            // rhs = C_ij - sum_{k>i} T_ik Y_kj - sum_{l>j} Y_il T_jl^T
            let mut rhs = c.view((i0, j0), (ni, nj)).into_owned();
            if i0 + ni < n {
                let t_right = t.view((i0, i0 + ni), (ni, n - i0 - ni));
                let y_below = y.view((i0 + ni, j0), (n - i0 - ni, nj));
                rhs -= t_right * y_below;
            }
            if j0 + nj < n {
                let y_right = y.view((i0, j0 + nj), (ni, n - j0 - nj));
                let t_jrow = t.view((j0, j0 + nj), (nj, n - j0 - nj));
                rhs -= y_right * t_jrow.transpose();
            }
            // solve T_ii Z + Z T_jj^T = rhs via the small Kronecker system
            let tii = t.view((i0, i0), (ni, ni)).into_owned();
            let tjj = t.view((j0, j0), (nj, nj)).into_owned();
            let m = crate::densela::kron(&DMatrix::identity(nj, nj), &tii)
                + crate::densela::kron(&tjj, &DMatrix::identity(ni, ni));
            let rhs_v = DVector::from_column_slice(rhs.as_slice());
            let z_v = m
                .lu()
                .solve(&rhs_v)
                .ok_or(LyapunovError::SingularSystem)?;
            let z = DMatrix::from_column_slice(ni, nj, z_v.as_slice());
            y.view_mut((i0, j0), (ni, nj)).copy_from(&z);
        }
    }
    Ok(y)
}

/// Solve Tᵀ Y + Y T = C with T real quasi-upper-triangular (so Tᵀ is
/// quasi-lower): forward block substitution.
fn solve_quasi_triangular_lyap_t(
    t: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LyapunovError> {
    let n = t.nrows();
    let mut starts = Vec::new();
    let mut k = 0;
    while k < n {
        starts.push(k);
        if k + 1 < n && t[(k + 1, k)].abs() > 0.0 {
            k += 2;
        } else {
            k += 1;
        }
    }
    let nb = starts.len();
    let block = |b: usize| -> (usize, usize) {
        let s = starts[b];
        let e = if b + 1 < nb { starts[b + 1] } else { n };
        (s, e - s)
    };
    let mut y = DMatrix::zeros(n, n);
    for bi in 0..nb {
        let (i0, ni) = block(bi);
        for bj in 0..nb {
            let (j0, nj) = block(bj);
            // rhs = C_ij - sum_{k<i} (Tᵀ)_ik Y_kj - sum_{l<j} Y_il T_lj
            let mut rhs = c.view((i0, j0), (ni, nj)).into_owned();
            if i0 > 0 {
                let t_above = t.view((0, i0), (i0, ni));
                let y_above = y.view((0, j0), (i0, nj));
                rhs -= t_above.transpose() * y_above;
            }
            if j0 > 0 {
                let y_left = y.view((i0, 0), (ni, j0));
                let t_left = t.view((0, j0), (j0, nj));
                rhs -= y_left * t_left;
            }
            let tii = t.view((i0, i0), (ni, ni)).into_owned();
            let tjj = t.view((j0, j0), (nj, nj)).into_owned();
            let m = crate::densela::kron(&DMatrix::identity(nj, nj), &tii.transpose())
                + crate::densela::kron(&tjj.transpose(), &DMatrix::identity(ni, ni));
            let rhs_v = DVector::from_column_slice(rhs.as_slice());
            let z_v = m
                .lu()
                .solve(&rhs_v)
                .ok_or(LyapunovError::SingularSystem)?;
            let z = DMatrix::from_column_slice(ni, nj, z_v.as_slice());
            y.view_mut((i0, j0), (ni, nj)).copy_from(&z);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn diagonal_closed_form() {
        // A = diag(-1,-2), W = B B^T with B = [1;0] -> X = diag(1/2, 0)
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let x = solve_lyapunov_dense(&a, &(&b * b.transpose())).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(x[(1, 1)].abs() < 1e-14);
        assert!(x[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn identity_case() {
        // A = -I, W = I -> X = I/2
        let a = -DMatrix::<f64>::identity(4, 4);
        let x = solve_lyapunov_dense(&a, &DMatrix::identity(4, 4)).unwrap();
        assert!((x - DMatrix::identity(4, 4) * 0.5).norm() < 1e-13);
    }

    #[test]
    fn random_stable_residual() {
        let mut rng = SplitMix64::new(11);
        for trial in 0..5 {
            let n = 10 + 3 * trial;
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            a -= DMatrix::identity(n, n) * (2.0 * n as f64);
            let b = DMatrix::from_fn(n, 2, |_, _| rng.normal());
            let w = &b * b.transpose();
            let x = solve_lyapunov_dense(&a, &w).unwrap();
            let res = &a * &x + &x * a.transpose() + &w;
            let scale = a.norm() * x.norm() + w.norm();
            assert!(res.norm() <= 1e-10 * scale, "residual too large: {}", res.norm());
        }
    }

    #[test]
    fn complex_spectrum_instance() {
        // spiral: eigenvalues -1 +/- 5i force 2x2 Schur blocks
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, -5.0, -1.0]);
        let w = DMatrix::identity(2, 2);
        let x = solve_lyapunov_dense(&a, &w).unwrap();
        let res = &a * &x + &x * a.transpose() + &w;
        assert!(res.norm() < 1e-12);
    }

    #[test]
    fn cached_transposed_solve() {
        let mut rng = SplitMix64::new(19);
        let n = 12;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (2.0 * n as f64);
        let b = DMatrix::from_fn(n, 3, |_, _| rng.normal());
        let w = &b * b.transpose();
        let cache = LyapSchur::new(&a).unwrap();
        let x = cache.solve(&w).unwrap();
        let res = &a * &x + &x * a.transpose() + &w;
        assert!(res.norm() < 1e-10 * (a.norm() * x.norm()).max(1.0));
        let y = cache.solve_transposed(&w).unwrap();
        let res_t = a.transpose() * &y + &y * &a + &w;
        assert!(res_t.norm() < 1e-10 * (a.norm() * y.norm()).max(1.0));
    }
}
