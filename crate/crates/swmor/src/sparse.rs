//! Sparse matrix storage, factorizations, and Matrix Market I/O.
//!
//! Per-mode system matrices are held in compressed sparse column form
//! ([`SpMat`]); dense blocks use `nalgebra`. The helpers here bridge the two
//! worlds and provide the structural-kernel detection used by the fast
//! Wong-space path.

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::Lu as SparseLuRaw;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};

pub type SpMat = SparseColMat<usize, f64>;

#[derive(Debug, thiserror::Error)]
pub enum SparseError {
    #[error("failed to assemble sparse matrix from triplets")]
    Assembly,
    #[error("sparse LU factorization failed (matrix numerically singular)")]
    SingularFactor,
    #[error("matrix market parse error: {0}")]
    MatrixMarket(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Build a CSC matrix from (row, col, value) triplets; duplicate entries are summed.
pub fn sp_from_triplets(
    nrows: usize,
    ncols: usize,
    triplets: &[(usize, usize, f64)],
) -> Result<SpMat, SparseError> {
    let t: Vec<Triplet<usize, usize, f64>> = triplets
        .iter()
        .map(|&(i, j, v)| Triplet::new(i, j, v))
        .collect();
    SpMat::try_new_from_triplets(nrows, ncols, &t).map_err(|_| SparseError::Assembly)
}

pub fn sp_identity(n: usize) -> SpMat {
    sp_from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>()).unwrap()
}

pub fn sp_zero(nrows: usize, ncols: usize) -> SpMat {
    sp_from_triplets(nrows, ncols, &[]).unwrap()
}

pub fn sp_scale(m: &SpMat, s: f64) -> SpMat {
    let mut t = sp_triplets(m);
    for e in &mut t {
        e.2 *= s;
    }
    sp_from_triplets(m.nrows(), m.ncols(), &t).unwrap()
}

/// All stored entries as (row, col, value).
pub fn sp_triplets(m: &SpMat) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for j in 0..m.ncols() {
        for (&i, &v) in m
            .row_idx_of_col_raw(j)
            .iter()
            .zip(m.val_of_col(j).iter())
        {
            out.push((i, j, v));
        }
    }
    out
}

/// Linear combination a*M + b*N of equally sized sparse matrices.
pub fn sp_add(a: f64, m: &SpMat, b: f64, n: &SpMat) -> SpMat {
    assert_eq!(m.nrows(), n.nrows());
    assert_eq!(m.ncols(), n.ncols());
    let mut t = Vec::new();
    for (i, j, v) in sp_triplets(m) {
        t.push((i, j, a * v));
    }
    for (i, j, v) in sp_triplets(n) {
        t.push((i, j, b * v));
    }
    sp_from_triplets(m.nrows(), m.ncols(), &t).unwrap()
}

pub fn sp_to_dense(m: &SpMat) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in sp_triplets(m) {
        d[(i, j)] += v;
    }
    d
}

pub fn sp_from_dense(m: &DMatrix<f64>) -> SpMat {
    let mut t = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)] != 0.0 {
                t.push((i, j, m[(i, j)]));
            }
        }
    }
    sp_from_triplets(m.nrows(), m.ncols(), &t).unwrap()
}

/// y = M x
pub fn sp_mul_vec(m: &SpMat, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(m.ncols(), x.len());
    let mut y = DVector::zeros(m.nrows());
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (&i, &v) in m
            .row_idx_of_col_raw(j)
            .iter()
            .zip(m.val_of_col(j).iter())
        {
            y[i] += v * xj;
        }
    }
    y
}

/// y = Mᵀ x
pub fn sp_mul_vec_t(m: &SpMat, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(m.nrows(), x.len());
    let mut y = DVector::zeros(m.ncols());
    for j in 0..m.ncols() {
        let mut acc = 0.0;
        for (&i, &v) in m
            .row_idx_of_col_raw(j)
            .iter()
            .zip(m.val_of_col(j).iter())
        {
            acc += v * x[i];
        }
        y[j] = acc;
    }
    y
}

/// Y = M X, dense multi-column right-hand side.
pub fn sp_mul_mat(m: &SpMat, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(m.nrows(), x.ncols());
    for c in 0..x.ncols() {
        let col = sp_mul_vec(m, &x.column(c).into_owned());
        y.set_column(c, &col);
    }
    y
}

/// Y = Mᵀ X, dense multi-column right-hand side.
pub fn sp_mul_mat_t(m: &SpMat, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(m.ncols(), x.ncols());
    for c in 0..x.ncols() {
        let col = sp_mul_vec_t(m, &x.column(c).into_owned());
        y.set_column(c, &col);
    }
    y
}

pub fn sp_frobenius(m: &SpMat) -> f64 {
    sp_triplets(m).iter().map(|(_, _, v)| v * v).sum::<f64>().sqrt()
}

fn mat_from_dmatrix(x: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

fn dmatrix_from_mat(x: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

/// Sparse LU factorization wrapper exposing plain and transposed solves.
pub struct SparseLu {
    lu: SparseLuRaw<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn new(m: &SpMat) -> Result<Self, SparseError> {
        assert_eq!(m.nrows(), m.ncols());
        let lu = m.sp_lu().map_err(|_| SparseError::SingularFactor)?;
        Ok(Self { lu, n: m.nrows() })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        DVector::from_fn(self.n, |i, _| x[(i, 0)])
    }

    pub fn solve_t_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        DVector::from_fn(self.n, |i, _| x[(i, 0)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        dmatrix_from_mat(&self.lu.solve(&mat_from_dmatrix(b)))
    }

    pub fn solve_t_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        dmatrix_from_mat(&self.lu.solve_transpose(&mat_from_dmatrix(b)))
    }
}

/// Structural splitting of a matrix whose zero rows and columns expose the
/// kernel directly: `zero_cols` index unit vectors spanning ker(E),
/// `zero_rows` index unit vectors spanning ker(Eᵀ), and the remaining square
/// block must be invertible for the shortcut to be valid.
pub struct StructuralKernel {
    pub zero_rows: Vec<usize>,
    pub zero_cols: Vec<usize>,
    pub live_rows: Vec<usize>,
    pub live_cols: Vec<usize>,
    block_lu: SparseLu,
    n: usize,
}

impl StructuralKernel {
    /// Detect exactly-zero rows/columns of E and factor the live block.
    /// Returns None when the pattern does not qualify (different numbers of
    /// zero rows and columns, or a singular live block).
    pub fn detect(e: &SpMat) -> Option<Self> {
        let n = e.nrows();
        if n != e.ncols() {
            return None;
        }
        let mut row_has = vec![false; n];
        let mut col_has = vec![false; n];
        for (i, j, v) in sp_triplets(e) {
            if v != 0.0 {
                row_has[i] = true;
                col_has[j] = true;
            }
        }
        let zero_rows: Vec<usize> = (0..n).filter(|&i| !row_has[i]).collect();
        let zero_cols: Vec<usize> = (0..n).filter(|&j| !col_has[j]).collect();
        if zero_rows.len() != zero_cols.len() {
            return None;
        }
        let live_rows: Vec<usize> = (0..n).filter(|&i| row_has[i]).collect();
        let live_cols: Vec<usize> = (0..n).filter(|&j| col_has[j]).collect();
        let mut row_map = vec![usize::MAX; n];
        for (k, &i) in live_rows.iter().enumerate() {
            row_map[i] = k;
        }
        let mut col_map = vec![usize::MAX; n];
        for (k, &j) in live_cols.iter().enumerate() {
            col_map[j] = k;
        }
        let m = live_rows.len();
        let mut t = Vec::new();
        for (i, j, v) in sp_triplets(e) {
            if v != 0.0 {
                t.push((row_map[i], col_map[j], v));
            }
        }
        let block = sp_from_triplets(m, m, &t).ok()?;
        let block_lu = SparseLu::new(&block).ok()?;
        // the shortcut is only valid when the live block is genuinely
        // invertible; probe once and reject on excessive solution growth
        // (a numerically singular block solves with huge ||x||)
        if m > 0 {
            let mut rng = crate::rng::SplitMix64::new(0x5EED_CAFE);
            let b = DVector::from_fn(m, |_, _| rng.normal());
            let x = block_lu.solve_vec(&b);
            if !x.iter().all(|v| v.is_finite()) {
                return None;
            }
            let scale = t.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
            if scale * x.norm() > 1e13 * b.norm() {
                return None;
            }
            let res = (sp_mul_vec(&block, &x) - &b).norm();
            if res > 1e-8 * (1.0 + scale * x.norm() + b.norm()) {
                return None;
            }
        }
        Some(Self {
            zero_rows,
            zero_cols,
            live_rows,
            live_cols,
            block_lu,
            n,
        })
    }

    pub fn kernel_dim(&self) -> usize {
        self.zero_cols.len()
    }

    /// Orthonormal (unit-vector) basis of ker(E) as columns.
    pub fn kernel_basis(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n, self.zero_cols.len());
        for (c, &j) in self.zero_cols.iter().enumerate() {
            k[(j, c)] = 1.0;
        }
        k
    }

    /// Orthonormal (unit-vector) basis of ker(Eᵀ) as columns.
    pub fn cokernel_basis(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n, self.zero_rows.len());
        for (c, &i) in self.zero_rows.iter().enumerate() {
            k[(i, c)] = 1.0;
        }
        k
    }

    /// x = E⁺ b for b in range(E): solves the live block, zero on the kernel.
    pub fn pinv_apply(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = self.live_rows.len();
        let mut br = DVector::zeros(m);
        for (k, &i) in self.live_rows.iter().enumerate() {
            br[k] = b[i];
        }
        let xr = self.block_lu.solve_vec(&br);
        let mut x = DVector::zeros(self.n);
        for (k, &j) in self.live_cols.iter().enumerate() {
            x[j] = xr[k];
        }
        x
    }

    /// x = (Eᵀ)⁺ b for b in range(Eᵀ).
    pub fn pinv_t_apply(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = self.live_cols.len();
        let mut br = DVector::zeros(m);
        for (k, &j) in self.live_cols.iter().enumerate() {
            br[k] = b[j];
        }
        let xr = self.block_lu.solve_t_vec(&br);
        let mut x = DVector::zeros(self.n);
        for (k, &i) in self.live_rows.iter().enumerate() {
            x[i] = xr[k];
        }
        x
    }
}

/// Write a matrix in Matrix Market "coordinate real general" format.
pub fn write_matrix_market<W: Write>(w: &mut W, m: &SpMat) -> Result<(), SparseError> {
    let t = sp_triplets(m);
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", m.nrows(), m.ncols(), t.len())?;
    for (i, j, v) in t {
        writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

/// Read a Matrix Market "coordinate real general" file.
pub fn read_matrix_market<R: BufRead>(r: R) -> Result<SpMat, SparseError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| SparseError::MatrixMarket("empty file".into()))??;
    if !header.starts_with("%%MatrixMarket matrix coordinate real") {
        return Err(SparseError::MatrixMarket(format!(
            "unsupported header: {header}"
        )));
    }
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        match dims {
            None => {
                let nr = parse_mm(it.next(), "rows")?;
                let nc = parse_mm(it.next(), "cols")?;
                let nnz = parse_mm(it.next(), "nnz")?;
                dims = Some((nr, nc, nnz));
            }
            Some(_) => {
                let i: usize = parse_mm(it.next(), "row index")?;
                let j: usize = parse_mm(it.next(), "col index")?;
                let v: f64 = it
                    .next()
                    .ok_or_else(|| SparseError::MatrixMarket("missing value".into()))?
                    .parse()
                    .map_err(|_| SparseError::MatrixMarket("bad value".into()))?;
                triplets.push((i - 1, j - 1, v));
            }
        }
    }
    let (nr, nc, _) = dims.ok_or_else(|| SparseError::MatrixMarket("missing size line".into()))?;
    sp_from_triplets(nr, nc, &triplets)
}

fn parse_mm<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T, SparseError> {
    tok.ok_or_else(|| SparseError::MatrixMarket(format!("missing {what}")))?
        .parse()
        .map_err(|_| SparseError::MatrixMarket(format!("bad {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense() {
        let m = sp_from_triplets(3, 3, &[(0, 0, 2.0), (1, 2, -1.0), (2, 0, 0.5), (2, 2, 3.0)])
            .unwrap();
        let d = sp_to_dense(&m);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((sp_mul_vec(&m, &x) - &d * &x).norm() < 1e-14);
        assert!((sp_mul_vec_t(&m, &x) - d.transpose() * &x).norm() < 1e-14);
    }

    #[test]
    fn sparse_lu_solves() {
        let m = sp_from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 3.0), (1, 2, 1.0), (2, 0, 1.0), (2, 2, 4.0)],
        )
        .unwrap();
        let lu = SparseLu::new(&m).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = lu.solve_vec(&b);
        assert!((sp_mul_vec(&m, &x) - &b).norm() < 1e-12);
        let xt = lu.solve_t_vec(&b);
        assert!((sp_mul_vec_t(&m, &xt) - &b).norm() < 1e-12);
    }

    #[test]
    fn structural_kernel_detects_trailing_zero() {
        // E = diag(1, 2, 0)
        let e = sp_from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let sk = StructuralKernel::detect(&e).unwrap();
        assert_eq!(sk.kernel_dim(), 1);
        assert_eq!(sk.zero_cols, vec![2]);
        let b = DVector::from_vec(vec![2.0, 4.0, 0.0]);
        let x = sk.pinv_apply(&b);
        assert!((x - DVector::from_vec(vec![2.0, 2.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn matrix_market_round_trip() {
        let m = sp_from_triplets(4, 3, &[(0, 0, 1.5), (3, 2, -2.25), (1, 1, 1e-17)]).unwrap();
        let mut buf = Vec::new();
        write_matrix_market(&mut buf, &m).unwrap();
        let back = read_matrix_market(std::io::Cursor::new(buf)).unwrap();
        assert!((sp_to_dense(&m) - sp_to_dense(&back)).norm() < 1e-300);
    }
}
