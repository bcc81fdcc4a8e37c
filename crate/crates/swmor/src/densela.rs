//! Dense linear algebra helpers shared across the toolkit: rank-revealing
//! orthonormalization, spectral norms, principal angles, and a scaling-and-
//! squaring matrix exponential for the desk-scale oracles.

use nalgebra::{DMatrix, DVector};

/// Orthonormal basis of the column space, truncating singular values below
/// `tol` relative to the largest. Returns an empty (n×0) matrix when the
/// input is (numerically) zero.
pub fn orth(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let r = svd
        .singular_values
        .iter()
        .filter(|&&s| s > tol * smax)
        .count();
    u.columns(0, r).into_owned()
}

/// Numerical rank with relative tolerance.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// Orthonormal basis of the null space of m (right null space).
pub fn null_space(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    // pad with zero rows so the SVD carries a full n-row right factor
    let work = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m.nrows()).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = work.svd(false, true);
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let smax = svd.singular_values.max();
    let r = if smax == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&s| s > tol * smax)
            .count()
    };
    vt.rows(r, n - r).transpose().into_owned()
}

/// Null space with an absolute singular-value threshold. Used for
/// admissibility conditions built from orthonormal factors, where the
/// relevant scale is known to the caller rather than to the matrix itself.
pub fn null_space_abs(m: &DMatrix<f64>, abs_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    let work = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m.nrows()).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = work.svd(false, true);
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let r = svd.singular_values.iter().filter(|&&s| s > abs_tol).count();
    vt.rows(r, n - r).transpose().into_owned()
}

/// Rescale every nonzero column to unit 2-norm (spans are preserved).
pub fn normalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        let norm = out.column(j).norm();
        if norm > 0.0 {
            out.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    out
}

/// Orthonormal basis of range(m)^⊥.
pub fn orth_complement(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let q = orth(m, tol);
    // null space of qᵀ
    null_space(&q.transpose(), tol)
}

/// Spectral norm via SVD (small/medium matrices).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal bases of equal dimension.
pub fn max_principal_angle(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    assert_eq!(q1.nrows(), q2.nrows());
    if q1.ncols() != q2.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    if q1.ncols() == 0 {
        return 0.0;
    }
    let c = q1.transpose() * q2;
    let sv = c.singular_values();
    let smin = sv.min().clamp(-1.0, 1.0);
    smin.acos()
}

/// Matrix exponential by scaling and squaring with Padé(13) approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let norm = a.abs().column_sum().max(); // 1-norm
    let theta13 = 5.371920351148152;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let a_scaled = a / 2f64.powi(s);
    let b: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let id = DMatrix::identity(n, n);
    let a2 = &a_scaled * &a_scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &id;
    let u = &a_scaled * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &id;
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut r = lhs
        .lu()
        .solve(&rhs)
        .expect("expm: denominator singular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Smallest singular value of a square dense matrix.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().min()
}

/// True when all eigenvalues have real part below -margin.
pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> bool {
    m.complex_eigenvalues().iter().all(|l| l.re < -margin)
}

/// Max eigenvalue of a symmetric matrix (symmetrized first).
pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}

/// Min eigenvalue of a symmetric matrix (symmetrized first).
pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Stack two matrices horizontally.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec_mat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of column-major vectorization.
pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn expm_matches_scalar_and_rotation() {
        let a = DMatrix::from_row_slice(1, 1, &[-2.0]);
        assert!((expm(&a)[(0, 0)] - (-2.0f64).exp()).abs() < 1e-14);

        // exp of a rotation generator
        let t = 0.7;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a);
        assert!((e[(0, 0)] - t.cos()).abs() < 1e-13);
        assert!((e[(1, 0)] - t.sin()).abs() < 1e-13);
    }

    #[test]
    fn expm_large_norm_uses_squaring() {
        let a = DMatrix::from_row_slice(2, 2, &[-30.0, 4.0, 0.0, -10.0]);
        let e1 = expm(&a);
        // exp(A) for triangular A has exp of diagonal on the diagonal
        assert!((e1[(0, 0)] - (-30.0f64).exp()).abs() < 1e-16);
        assert!((e1[(1, 1)] - (-10.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let ns = null_space(&m, 1e-12);
        assert_eq!(ns.ncols(), 2);
        assert!((&m * &ns).norm() < 1e-12);
    }

    #[test]
    fn principal_angle_of_rotated_plane() {
        let mut rng = SplitMix64::new(5);
        let q = orth(&DMatrix::from_fn(6, 2, |_, _| rng.normal()), 1e-12);
        assert!(max_principal_angle(&q, &q) < 1e-7);
    }
}
