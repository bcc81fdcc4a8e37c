//! Quasi-Weierstrass decomposition of regular matrix pencils.
//!
//! For a regular pencil (E, A) the Wong subspace limits 𝒱* and 𝒲* split the
//! state space into a differential part (governed by a stable J) and a
//! nilpotent algebraic part (N). Everything downstream — consistency
//! projectors, diff/imp selectors, jump maps — derives from that splitting.
//!
//! Large sparse modes never materialize n×n transforms. The differential
//! basis V̂ is kept as the orthogonal complement of a thin matrix D with
//! range(D) = (𝒱*)^⊥ (applied through Householder reflectors), Ŵ is a thin
//! explicit basis of 𝒲*, and every use of S = [E V̂, A Ŵ]⁻¹ is a solve
//! against thin blocks. Dense fallbacks exist for small or unstructured
//! pencils.

use crate::densela::{self, orth};
use crate::householder::HouseholderQ;
use crate::rng::SplitMix64;
use crate::sparse::{self, SpMat, SparseLu, StructuralKernel};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Hard cap on the nilpotency index; realistic applications stay at or
/// below three.
pub const NU_MAX: usize = 10;

/// Dense-materialization threshold used across the toolkit.
pub const DENSE_LIMIT: usize = 500;

#[derive(Debug, Error)]
pub enum QwfError {
    #[error("dimension mismatch: E is {0}x{1}, A is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("pencil is not regular: dim V* ({0}) + dim W* ({1}) != n ({2})")]
    NotRegular(usize, usize, usize),
    #[error("ambiguous rank decision: singular value {0:.3e} within a factor 10 of threshold {1:.3e}")]
    ToleranceFailure(f64, f64),
    #[error("transform [E*Vhat, A*What] is numerically singular")]
    SingularTransform,
    #[error("nilpotency index exceeds cap {0}")]
    IndexCapExceeded(usize),
}

/// A square matrix pencil (E, A).
pub struct Pencil {
    pub e: SpMat,
    pub a: SpMat,
    pub n: usize,
}

impl Pencil {
    pub fn new(e: SpMat, a: SpMat) -> Result<Self, QwfError> {
        let n = e.nrows();
        if e.ncols() != n || a.nrows() != n || a.ncols() != n {
            return Err(QwfError::DimensionMismatch(
                e.nrows(),
                e.ncols(),
                a.nrows(),
                a.ncols(),
            ));
        }
        Ok(Self { e, a, n })
    }

    pub fn from_dense(e: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Self, QwfError> {
        Self::new(sparse::sp_from_dense(e), sparse::sp_from_dense(a))
    }
}

/// Probabilistic regularity check: det(sE - A) is not identically zero.
///
/// Draws `trials` shifts of magnitude around ‖A‖_F/‖E‖_F and accepts as soon
/// as one shifted matrix factors with a healthy residual on a random
/// right-hand side. Deterministic for a given seed.
pub fn regularity_check(p: &Pencil, trials: usize, seed: u64) -> bool {
    let mut rng = SplitMix64::new(seed);
    let norm_e = sparse::sp_frobenius(&p.e);
    let norm_a = sparse::sp_frobenius(&p.a);
    let radius = if norm_e > 0.0 && norm_a > 0.0 {
        norm_a / norm_e
    } else {
        1.0
    };
    for _ in 0..trials.max(1) {
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        let s = sign * radius * rng.uniform(0.5, 1.5);
        let shifted = sparse::sp_add(s, &p.e, -1.0, &p.a);
        let scale = sparse::sp_frobenius(&shifted);
        if scale == 0.0 {
            continue;
        }
        let lu = match SparseLu::new(&shifted) {
            Ok(lu) => lu,
            Err(_) => continue,
        };
        let b = DVector::from_fn(p.n, |_, _| rng.normal());
        let x = lu.solve_vec(&b);
        if !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        let res = (sparse::sp_mul_vec(&shifted, &x) - &b).norm();
        // pivot-growth proxy: residual relative to data and solution size
        if res <= 1e-8 * (1.0 + scale * x.norm() + b.norm()) {
            return true;
        }
    }
    false
}

/// Orthonormalize columns with an ambiguity guard on the rank decision.
fn checked_orth(m: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>, QwfError> {
    if m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd u");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let thresh = rank_tol * smax;
    let mut r = 0;
    for &s in svd.singular_values.iter() {
        if s > thresh {
            if s < 10.0 * thresh {
                return Err(QwfError::ToleranceFailure(s, thresh));
            }
            r += 1;
        } else if s > thresh / 10.0 {
            return Err(QwfError::ToleranceFailure(s, thresh));
        }
    }
    Ok(u.columns(0, r).into_owned())
}

/// Thin subspace data for the Wong limits: an orthonormal basis `what` of 𝒲*
/// and an orthonormal basis `d` of (𝒱*)^⊥.
pub struct WongSpaces {
    pub d: DMatrix<f64>,
    pub what: DMatrix<f64>,
    pub used_shortcut: bool,
}

/// Representation of the action of E⁺ / (Eᵀ)⁺ plus kernel bases.
pub enum EPinv {
    Structural(StructuralKernel),
    Dense {
        pinv: DMatrix<f64>,
        kernel: DMatrix<f64>,
        cokernel: DMatrix<f64>,
    },
}

impl EPinv {
    pub fn kernel_basis(&self) -> DMatrix<f64> {
        match self {
            EPinv::Structural(s) => s.kernel_basis(),
            EPinv::Dense { kernel, .. } => kernel.clone(),
        }
    }

    pub fn cokernel_basis(&self) -> DMatrix<f64> {
        match self {
            EPinv::Structural(s) => s.cokernel_basis(),
            EPinv::Dense { cokernel, .. } => cokernel.clone(),
        }
    }

    pub fn apply(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            EPinv::Structural(s) => s.pinv_apply(b),
            EPinv::Dense { pinv, .. } => pinv * b,
        }
    }

    pub fn apply_t(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            EPinv::Structural(s) => s.pinv_t_apply(b),
            EPinv::Dense { pinv, .. } => pinv.transpose() * b,
        }
    }

    fn apply_t_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            out.set_column(j, &self.apply_t(&b.column(j).into_owned()));
        }
        out
    }
}

fn epinv_dense(e: &DMatrix<f64>, rank_tol: f64) -> EPinv {
    let n = e.nrows();
    let svd = e.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let r = if smax == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&s| s > rank_tol * smax)
            .count()
    };
    let mut pinv = DMatrix::zeros(n, n);
    for k in 0..r {
        let vk = vt.row(k).transpose();
        let uk = u.column(k).into_owned();
        pinv += vk * uk.transpose() / svd.singular_values[k];
    }
    let kernel = vt.rows(r, n - r).transpose().into_owned();
    let cokernel = u.columns(r, n - r).into_owned();
    EPinv::Dense {
        pinv,
        kernel,
        cokernel,
    }
}

/// Compute the Wong limits. The structural fast path is taken when E has an
/// exactly-zero row/column pattern exposing its kernel and A admits a sparse
/// LU; otherwise the dense subspace iteration runs.
pub fn wong_spaces(p: &Pencil, rank_tol: f64) -> Result<(WongSpaces, EPinv, Option<SparseLu>), QwfError> {
    let structural = StructuralKernel::detect(&p.e);
    let a_lu = SparseLu::new(&p.a).ok();
    if let (Some(sk), Some(alu)) = (structural, a_lu) {
        // Validate the factor once: kernel of a structural E must be exact.
        let spaces = wong_spaces_structural(p, &sk, &alu, rank_tol)?;
        return Ok((spaces, EPinv::Structural(sk), Some(alu)));
    }
    let e = sparse::sp_to_dense(&p.e);
    let a = sparse::sp_to_dense(&p.a);
    let spaces = wong_spaces_dense(&e, &a, rank_tol)?;
    let epinv = epinv_dense(&e, rank_tol);
    let a_lu = SparseLu::new(&p.a).ok();
    Ok((spaces, epinv, a_lu))
}

fn wong_spaces_structural(
    p: &Pencil,
    sk: &StructuralKernel,
    a_lu: &SparseLu,
    rank_tol: f64,
) -> Result<WongSpaces, QwfError> {
    let n = p.n;
    let k_basis = sk.kernel_basis();
    let k_co = sk.cokernel_basis();

    let norm_a = sparse::sp_frobenius(&p.a).max(1.0);
    let cond_tol = rank_tol.max(64.0 * f64::EPSILON * n as f64);

    // W-sequence: W1 = ker E, W_{j+1} = { x : E x in span(A W_j) }.
    let mut what = k_basis.clone();
    for _ in 0..NU_MAX + 1 {
        let aw = sparse::sp_mul_mat(&p.a, &what);
        // admissible combinations: A W c must lie in range(E)
        let cond = k_co.transpose() * &aw;
        let nc = densela::null_space_abs(&cond, cond_tol * norm_a);
        let mut gen = DMatrix::zeros(n, nc.ncols() + k_basis.ncols() + what.ncols());
        let pre = {
            let rhs = &aw * &nc;
            let mut out = DMatrix::zeros(n, rhs.ncols());
            for j in 0..rhs.ncols() {
                out.set_column(j, &sk.pinv_apply(&rhs.column(j).into_owned()));
            }
            densela::normalize_columns(&out)
        };
        gen.columns_mut(0, pre.ncols()).copy_from(&pre);
        gen.columns_mut(pre.ncols(), k_basis.ncols()).copy_from(&k_basis);
        gen.columns_mut(pre.ncols() + k_basis.ncols(), what.ncols())
            .copy_from(&what);
        let next = checked_orth(&gen, rank_tol)?;
        if next.ncols() == what.ncols() {
            what = next;
            break;
        }
        what = next;
    }

    // complement iteration for V*: D_{i+1} = orth(A^T * basis of (E^T)^{-1}(span D_i))
    let mut d = DMatrix::<f64>::zeros(n, 0);
    for _ in 0..NU_MAX + 1 {
        let pre = preimage_et_span(sk, &d, rank_tol)?;
        let at_pre = densela::normalize_columns(&sparse::sp_mul_mat_t(&p.a, &pre));
        let gen = densela::hcat(&d, &at_pre);
        let next = checked_orth(&gen, rank_tol)?;
        if next.ncols() == d.ncols() {
            d = next;
            break;
        }
        d = next;
    }
    let _ = a_lu; // A invertibility already established by the caller
    let n_n = what.ncols();
    if d.ncols() != n_n || n_n > n {
        return Err(QwfError::NotRegular(n - d.ncols(), n_n, n));
    }
    Ok(WongSpaces {
        d,
        what,
        used_shortcut: true,
    })
}

/// Basis of { w : Eᵀ w ∈ span(D) } for a structural E.
fn preimage_et_span(
    sk: &StructuralKernel,
    d: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<DMatrix<f64>, QwfError> {
    let k_basis = sk.kernel_basis();
    let k_co = sk.cokernel_basis();
    let n = k_basis.nrows();
    // D c must lie in range(Eᵀ) = (ker E)^⊥; D and K orthonormal, so the
    // admissibility system has unit scale
    let cond = k_basis.transpose() * d;
    let nc = densela::null_space_abs(&cond, rank_tol.max(64.0 * f64::EPSILON * n as f64));
    let rhs = d * &nc;
    let mut pre = DMatrix::zeros(n, rhs.ncols());
    for j in 0..rhs.ncols() {
        pre.set_column(j, &sk.pinv_t_apply(&rhs.column(j).into_owned()));
    }
    checked_orth(&densela::hcat(&densela::normalize_columns(&pre), &k_co), rank_tol)
}

fn wong_spaces_dense(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<WongSpaces, QwfError> {
    let n = e.nrows();
    // V-sequence: V_{i+1} = { x : A x in range(E V_i) }, V_0 = R^n
    let mut v: DMatrix<f64> = DMatrix::identity(n, n);
    for _ in 0..n + 1 {
        let ev = e * &v;
        let q = checked_orth(&ev, rank_tol)?;
        let resid = a - &q * (q.transpose() * a);
        let next = densela::null_space(&resid, rank_tol.max(1e-13));
        if next.ncols() == v.ncols() {
            v = next;
            break;
        }
        v = next;
    }
    // W-sequence: W_{j+1} = { x : E x in range(A W_j) }, W_1 = ker(E)
    let mut w: DMatrix<f64> = DMatrix::zeros(n, 0);
    for _ in 0..n + 1 {
        let aw = a * &w;
        let q = checked_orth(&aw, rank_tol)?;
        let resid = e - &q * (q.transpose() * e);
        let next = densela::null_space(&resid, rank_tol.max(1e-13));
        if next.ncols() == w.ncols() {
            w = next;
            break;
        }
        w = next;
    }
    let n_j = v.ncols();
    let n_n = w.ncols();
    if n_j + n_n != n {
        return Err(QwfError::NotRegular(n_j, n_n, n));
    }
    let d = densela::orth_complement(&v, rank_tol.max(1e-13));
    Ok(WongSpaces {
        d,
        what: w,
        used_shortcut: false,
    })
}

/// Public Wong-sequence entry point returning dense orthonormal bases of 𝒱*
/// and 𝒲*. Materializes V̂, so intended for desk-scale use; the reduction
/// pipeline works with the implicit representation instead.
pub fn wong_sequences(p: &Pencil, rank_tol: f64) -> Result<(DMatrix<f64>, DMatrix<f64>), QwfError> {
    let (spaces, _, _) = wong_spaces(p, rank_tol)?;
    let q = HouseholderQ::new(&spaces.d);
    Ok((q.complement_dense(), spaces.what))
}

/// The implicit operator core of a decomposed mode. All maps run in
/// O(n · n_N) plus sparse matrix-vector products.
pub struct QwfCore {
    pub n: usize,
    pub n_j: usize,
    pub n_n: usize,
    pub e: SpMat,
    pub a: SpMat,
    d: DMatrix<f64>,
    qv: HouseholderQ,
    what: DMatrix<f64>,
    e_pinv: EPinv,
    a_lu: Option<SparseLu>,
    /// thin basis of (E 𝒱*)^⊥
    h: DMatrix<f64>,
    a_what: DMatrix<f64>,
    haw_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    haw_t_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dw_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dw_t_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    k_basis: DMatrix<f64>,
    /// pseudo-inverse of Dᵀ K (k × n_N)
    pinv_dk: DMatrix<f64>,
    /// nilpotent block N = [0 I] S E Ŵ
    pub n_block: DMatrix<f64>,
}

impl QwfCore {
    pub fn build(p: &Pencil, rank_tol: f64) -> Result<Self, QwfError> {
        let (spaces, e_pinv, a_lu) = wong_spaces(p, rank_tol)?;
        Self::from_spaces(p, spaces, e_pinv, a_lu, rank_tol)
    }

    pub fn from_spaces(
        p: &Pencil,
        spaces: WongSpaces,
        e_pinv: EPinv,
        a_lu: Option<SparseLu>,
        rank_tol: f64,
    ) -> Result<Self, QwfError> {
        let n = p.n;
        let d = spaces.d;
        let what = spaces.what;
        let n_n = what.ncols();
        let n_j = n - n_n;
        let qv = HouseholderQ::new(&d);
        let k_basis = e_pinv.kernel_basis();

        // H = basis of (E V*)^⊥ = { w : Eᵀ w in span(D) }
        let h = {
            let cond = k_basis.transpose() * &d;
            let nc = densela::null_space_abs(&cond, rank_tol.max(64.0 * f64::EPSILON * n as f64));
            let rhs = &d * &nc;
            let pre = densela::normalize_columns(&e_pinv.apply_t_mat(&rhs));
            let cok = e_pinv.cokernel_basis();
            orth(&densela::hcat(&pre, &cok), rank_tol.max(1e-13))
        };
        if h.ncols() != n_n {
            return Err(QwfError::SingularTransform);
        }

        let a_what = sparse::sp_mul_mat(&p.a, &what);
        let haw = h.transpose() * &a_what;
        let haw_lu = haw.clone().lu();
        let haw_t_lu = haw.transpose().lu();
        if !lu_invertible(&haw_lu, n_n) {
            return Err(QwfError::SingularTransform);
        }
        let dw = d.transpose() * &what;
        let dw_lu = dw.clone().lu();
        let dw_t_lu = dw.transpose().lu();
        if !lu_invertible(&dw_lu, n_n) {
            return Err(QwfError::SingularTransform);
        }
        let dk = d.transpose() * &k_basis;
        let pinv_dk = pinv_small(&dk);

        let mut core = Self {
            n,
            n_j,
            n_n,
            e: p.e.clone(),
            a: p.a.clone(),
            d,
            qv,
            what,
            e_pinv,
            a_lu,
            h,
            a_what,
            haw_lu,
            haw_t_lu,
            dw_lu,
            dw_t_lu,
            k_basis,
            pinv_dk,
            n_block: DMatrix::zeros(0, 0),
        };
        let e_what = sparse::sp_mul_mat(&core.e, &core.what);
        core.n_block = core.x2_mat(&e_what);
        Ok(core)
    }

    /// V̂ v
    pub fn vhat_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.qv.apply_complement(v)
    }

    /// V̂ᵀ x
    pub fn vhat_t_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.qv.apply_complement_t(x)
    }

    pub fn vhat_mul_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, v.ncols());
        for j in 0..v.ncols() {
            out.set_column(j, &self.vhat_mul(&v.column(j).into_owned()));
        }
        out
    }

    pub fn vhat_t_mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_j, x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.vhat_t_mul(&x.column(j).into_owned()));
        }
        out
    }

    pub fn what(&self) -> &DMatrix<f64> {
        &self.what
    }

    /// Y₂ x = [0 I] T⁻¹ x
    pub fn y2(&self, x: &DVector<f64>) -> DVector<f64> {
        let rhs = self.d.transpose() * x;
        self.dw_lu.solve(&rhs).expect("dw solvable")
    }

    /// Consistency projector Π x = x − Ŵ Y₂ x
    pub fn pi(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.n_n == 0 {
            return x.clone();
        }
        x - &self.what * self.y2(x)
    }

    /// Πᵀ x = x − Y₂ᵀ Ŵᵀ x
    pub fn pi_t(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.n_n == 0 {
            return x.clone();
        }
        let t = self
            .dw_t_lu
            .solve(&(self.what.transpose() * x))
            .expect("dw solvable");
        x - &self.d * t
    }

    /// Y₁ x = [I 0] T⁻¹ x
    pub fn y1(&self, x: &DVector<f64>) -> DVector<f64> {
        self.vhat_t_mul(&self.pi(x))
    }

    /// X₂ y = [0 I] S y
    pub fn x2(&self, y: &DVector<f64>) -> DVector<f64> {
        let rhs = self.h.transpose() * y;
        self.haw_lu.solve(&rhs).expect("haw solvable")
    }

    pub fn x2_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.h.transpose() * y;
        self.haw_lu.solve(&rhs).expect("haw solvable")
    }

    /// Unique w ∈ 𝒱* with E w = y for y ∈ E𝒱* (least-squares corrected).
    fn solve_e_in_v(&self, y: &DVector<f64>) -> DVector<f64> {
        let w0 = self.e_pinv.apply(y);
        if self.k_basis.ncols() == 0 {
            return w0;
        }
        let c = &self.pinv_dk * (-(self.d.transpose() * &w0));
        w0 + &self.k_basis * c
    }

    /// (map of solve_e_in_v)ᵀ
    fn solve_e_in_v_t(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.k_basis.ncols() == 0 {
            return self.e_pinv.apply_t(x);
        }
        let t = self.pinv_dk.transpose() * (self.k_basis.transpose() * x);
        self.e_pinv.apply_t(&(x - &self.d * t))
    }

    /// X₁ y = [I 0] S y
    pub fn s_top(&self, y: &DVector<f64>) -> DVector<f64> {
        let y1 = if self.n_n == 0 {
            y.clone()
        } else {
            let z2 = self.x2(y);
            y - &self.a_what * z2
        };
        self.vhat_t_mul(&self.solve_e_in_v(&y1))
    }

    pub fn s_top_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_j, y.ncols());
        for j in 0..y.ncols() {
            out.set_column(j, &self.s_top(&y.column(j).into_owned()));
        }
        out
    }

    /// X₁ᵀ v = Sᵀ [I;0] v — the transposed dual rows, used to lift test
    /// directions back to the full space.
    pub fn s_top_t(&self, v: &DVector<f64>) -> DVector<f64> {
        let g = self.solve_e_in_v_t(&self.vhat_mul(v));
        if self.n_n == 0 {
            return g;
        }
        let t = self
            .haw_t_lu
            .solve(&(self.a_what.transpose() * &g))
            .expect("haw solvable");
        g - &self.h * t
    }

    /// J v (differential block of S A T)
    pub fn j_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let av = sparse::sp_mul_vec(&self.a, &self.vhat_mul(v));
        // A V̂ v lies in E 𝒱*, so the algebraic part of the solve vanishes
        self.vhat_t_mul(&self.solve_e_in_v(&av))
    }

    /// Jᵀ v
    pub fn j_t_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = self.solve_e_in_v_t(&self.vhat_mul(v));
        self.vhat_t_mul(&sparse::sp_mul_vec_t(&self.a, &x))
    }

    /// J⁻¹ v; requires A invertible.
    pub fn j_solve(&self, v: &DVector<f64>) -> Option<DVector<f64>> {
        let lu = self.a_lu.as_ref()?;
        let ev = sparse::sp_mul_vec(&self.e, &self.vhat_mul(v));
        Some(self.vhat_t_mul(&lu.solve_vec(&ev)))
    }

    /// J⁻ᵀ v; requires A invertible.
    pub fn j_solve_t(&self, v: &DVector<f64>) -> Option<DVector<f64>> {
        let lu = self.a_lu.as_ref()?;
        let atv = lu.solve_t_vec(&self.vhat_mul(v));
        Some(self.vhat_t_mul(&sparse::sp_mul_vec_t(&self.e, &atv)))
    }

    /// Differential input map [I 0] S B for dense B.
    pub fn b_top(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.s_top_mat(b)
    }

    /// Impulse input coordinates [0 I] S B (Ŵ-frame).
    pub fn b_imp_coords(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.n_n == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        self.x2_mat(b)
    }

    /// C V̂ for dense C (p×n) — returned as p×n_J.
    pub fn c_vhat(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        self.vhat_t_mul_mat(&c.transpose()).transpose()
    }

    /// Thin row matrix X₂ E = [0 I] S E (n_N × n).
    pub fn x2_e_rows(&self) -> DMatrix<f64> {
        let het = sparse::sp_mul_mat_t(&self.e, &self.h); // Eᵀ H, n×n_N
        self.haw_lu
            .solve(&het.transpose())
            .expect("haw solvable")
    }

    /// Thin row matrix Y₂ = (DᵀŴ)⁻¹ Dᵀ (n_N × n).
    pub fn y2_rows(&self) -> DMatrix<f64> {
        self.dw_lu
            .solve(&self.d.transpose().into_owned())
            .expect("dw solvable")
    }

    /// Nilpotency index: smallest k with ‖N^k‖_F ≤ tol·max(1, ‖N‖_F).
    pub fn nilpotency_index(&self, rank_tol: f64) -> Result<usize, QwfError> {
        if self.n_n == 0 {
            return Ok(0);
        }
        let scale = rank_tol * self.n_block.norm().max(1.0);
        let mut pow = DMatrix::identity(self.n_n, self.n_n);
        for k in 1..=NU_MAX {
            pow = &pow * &self.n_block;
            if pow.norm() <= scale {
                return Ok(k);
            }
        }
        Err(QwfError::IndexCapExceeded(NU_MAX))
    }
}

fn lu_invertible(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, n: usize) -> bool {
    if n == 0 {
        return true;
    }
    let u = lu.u();
    let mut max_d: f64 = 0.0;
    let mut min_d = f64::INFINITY;
    for i in 0..n {
        let d = u[(i, i)].abs();
        max_d = max_d.max(d);
        min_d = min_d.min(d);
    }
    min_d > 1e-13 * max_d.max(1e-300)
}

fn pinv_small(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone()
        .svd(true, true)
        .pseudo_inverse(1e-13)
        .expect("pinv")
}

/// Decomposition summary of one mode (dimensions, index, and the operator
/// core granting access to the transforms).
pub struct ModeDecomposition {
    pub core: QwfCore,
    pub nu: usize,
}

/// Derived per-mode matrices for given input/output maps. Small dense blocks
/// only: operating in the implicit frames keeps everything thin.
pub struct ProjectorSet {
    /// [I 0] S B (n_J × m): differential input coordinates.
    pub b_diff_coords: DMatrix<f64>,
    /// [0 I] S B (n_N × m): impulse input coordinates in the Ŵ-frame.
    pub b_imp_coords: DMatrix<f64>,
    /// C V̂ (p × n_J): differential output coordinates.
    pub c_diff_coords: DMatrix<f64>,
    /// C Ŵ (p × n_N): impulse output coordinates.
    pub c_what: DMatrix<f64>,
    /// Feedthrough blocks D_i = −C^imp (E^imp)^i B^imp (i = 0..ν−1), each p×m,
    /// multiplying u^{(i)}.
    pub feedthrough: Vec<DMatrix<f64>>,
}

/// Decompose a pencil with input/output maps, forming the QWF operator core
/// and the derived projector data.
pub fn qwf_decompose(
    p: &Pencil,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<(ModeDecomposition, ProjectorSet), QwfError> {
    let core = QwfCore::build(p, rank_tol)?;
    let nu = core.nilpotency_index(rank_tol)?;
    let b_diff_coords = core.b_top(b);
    let b_imp_coords = core.b_imp_coords(b);
    let c_diff_coords = core.c_vhat(c);
    let c_what = c * core.what();
    // feedthrough: -C^imp (E^imp)^i B^imp = -(C Ŵ) N^i (X₂ B)
    let mut feedthrough = Vec::new();
    let mut npow_b = b_imp_coords.clone();
    for _ in 0..nu {
        feedthrough.push(-(&c_what * &npow_b));
        npow_b = &core.n_block * npow_b;
    }
    Ok((
        ModeDecomposition { core, nu },
        ProjectorSet {
            b_diff_coords,
            b_imp_coords,
            c_diff_coords,
            c_what,
            feedthrough,
        },
    ))
}

/// Default rank tolerance: n · ε · 64.
pub fn default_rank_tol(n: usize) -> f64 {
    n as f64 * f64::EPSILON * 64.0
}

/// Densified views of the decomposition (desk scale / tests).
pub struct DenseQwf {
    pub vhat: DMatrix<f64>,
    pub what: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub n_block: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub a_diff: DMatrix<f64>,
    pub e_imp: DMatrix<f64>,
}

impl QwfCore {
    /// Materialize the dense transforms; O(n²·n_N) work, intended for
    /// n ≤ DENSE_LIMIT.
    pub fn densify(&self) -> DenseQwf {
        let n = self.n;
        let vhat = self.qv.complement_dense();
        let what = self.what.clone();
        let t = densela::hcat(&vhat, &what);
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            let top = self.s_top(&e);
            let bot = if self.n_n > 0 {
                self.x2(&e)
            } else {
                DVector::zeros(0)
            };
            for r in 0..self.n_j {
                s[(r, i)] = top[r];
            }
            for r in 0..self.n_n {
                s[(self.n_j + r, i)] = bot[r];
            }
        }
        let mut j = DMatrix::zeros(self.n_j, self.n_j);
        for i in 0..self.n_j {
            let mut e = DVector::zeros(self.n_j);
            e[i] = 1.0;
            j.set_column(i, &self.j_mul(&e));
        }
        let mut pi = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            pi.set_column(i, &self.pi(&e));
        }
        // A^diff = V̂ [I 0] S A, E^imp = Ŵ [0 I] S E
        let a_dense = sparse::sp_to_dense(&self.a);
        let a_diff = &vhat * self.s_top_mat(&a_dense);
        let e_imp = if self.n_n > 0 {
            &what * self.x2_e_rows()
        } else {
            DMatrix::zeros(n, n)
        };
        DenseQwf {
            vhat,
            what,
            t,
            s,
            j,
            n_block: self.n_block.clone(),
            pi,
            a_diff,
            e_imp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::sp_from_dense;

    fn pencil_dense(e: &[f64], a: &[f64], n: usize) -> Pencil {
        Pencil::from_dense(
            &DMatrix::from_row_slice(n, n, e),
            &DMatrix::from_row_slice(n, n, a),
        )
        .unwrap()
    }

    #[test]
    fn regularity_examples() {
        let p = pencil_dense(&[1.0, 0.0, 0.0, 1.0], &[-1.0, 0.0, 0.0, -1.0], 2);
        assert!(regularity_check(&p, 4, 1));

        let zero = Pencil::new(sparse::sp_zero(2, 2), sparse::sp_zero(2, 2)).unwrap();
        assert!(!regularity_check(&zero, 4, 1));

        // det(sE - A) = -1: regular even though index 2
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 2);
        assert!(regularity_check(&p, 4, 1));
    }

    #[test]
    fn wong_limits_ode_pencil() {
        let p = pencil_dense(&[1.0, 0.0, 0.0, 1.0], &[-1.0, 0.0, 0.0, -1.0], 2);
        let (vhat, what) = wong_sequences(&p, default_rank_tol(2)).unwrap();
        assert_eq!(vhat.ncols(), 2);
        assert_eq!(what.ncols(), 0);
    }

    #[test]
    fn wong_limits_semi_explicit() {
        // E = diag(1,0), A = diag(-1,1): already in QWF
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 1.0], 2);
        let (vhat, what) = wong_sequences(&p, default_rank_tol(2)).unwrap();
        assert_eq!(vhat.ncols(), 1);
        assert_eq!(what.ncols(), 1);
        assert!((vhat[(0, 0)].abs() - 1.0).abs() < 1e-12 && vhat[(1, 0)].abs() < 1e-12);
        assert!((what[(1, 0)].abs() - 1.0).abs() < 1e-12 && what[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn wong_limits_pure_nilpotent() {
        // hand iteration: V¹ = span(e₂), V² = {0}; W* = R²
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 2);
        let (vhat, what) = wong_sequences(&p, default_rank_tol(2)).unwrap();
        assert_eq!(vhat.ncols(), 0);
        assert_eq!(what.ncols(), 2);
    }

    #[test]
    fn qwf_ode_mode() {
        let p = pencil_dense(&[1.0, 0.0, 0.0, 1.0], &[-1.0, 0.0, 0.0, -1.0], 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let (md, ps) = qwf_decompose(&p, &b, &c, default_rank_tol(2)).unwrap();
        assert_eq!(md.nu, 0);
        assert_eq!(md.core.n_j, 2);
        let dq = md.core.densify();
        assert!((dq.pi - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((dq.a_diff + DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(dq.e_imp.norm() < 1e-12);
        assert!(ps.feedthrough.is_empty());
    }

    #[test]
    fn qwf_semi_explicit_mode() {
        // E = diag(1,0), A = diag(-1,1), B = [1;1], C = [1,1]
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 1.0], 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (md, ps) = qwf_decompose(&p, &b, &c, default_rank_tol(2)).unwrap();
        assert_eq!(md.nu, 1);
        let dq = md.core.densify();
        let pi_expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((dq.pi - pi_expect).norm() < 1e-12);
        let adiff_expect = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        assert!((dq.a_diff - adiff_expect).norm() < 1e-12);
        // B^diff = V̂ b_diff_coords = [1;0]
        let bdiff = &dq.vhat * &ps.b_diff_coords;
        assert!((bdiff - DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).norm() < 1e-12);
        // B^imp = Ŵ b_imp_coords = [0;1]
        let bimp = &dq.what * &ps.b_imp_coords;
        assert!((bimp - DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).norm() < 1e-12);
        assert!(dq.e_imp.norm() < 1e-12);
        // feedthrough block i=0: -C^imp B^imp = -[0,1][0;1] = -1
        assert_eq!(ps.feedthrough.len(), 1);
        assert!((ps.feedthrough[0][(0, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn qwf_nilpotent_mode() {
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let (md, _) = qwf_decompose(&p, &b, &c, default_rank_tol(2)).unwrap();
        assert_eq!(md.core.n_j, 0);
        assert_eq!(md.nu, 2);
        let dq = md.core.densify();
        assert!(dq.pi.norm() < 1e-12);
        assert!(dq.a_diff.norm() < 1e-12);
    }

    #[test]
    fn qwf_reconstruction_residual() {
        // random regular pencils: S E T = diag(I, N), S A T = diag(J, I)
        let mut rng = SplitMix64::new(17);
        for trial in 0..6 {
            let n = 5 + trial;
            // build via random T, S with known blocks
            let n_n = trial % 3;
            let n_j = n - n_n;
            let mut jblk = DMatrix::from_fn(n_j, n_j, |_, _| rng.normal());
            jblk -= DMatrix::identity(n_j, n_j) * (n as f64);
            let mut nblk = DMatrix::zeros(n_n, n_n);
            for i in 0..n_n.saturating_sub(1) {
                nblk[(i, i + 1)] = 1.0;
            }
            let tinv = random_invertible(&mut rng, n);
            let sinv = random_invertible(&mut rng, n);
            let mut e0 = DMatrix::zeros(n, n);
            e0.view_mut((0, 0), (n_j, n_j))
                .copy_from(&DMatrix::identity(n_j, n_j));
            e0.view_mut((n_j, n_j), (n_n, n_n)).copy_from(&nblk);
            let mut a0 = DMatrix::zeros(n, n);
            a0.view_mut((0, 0), (n_j, n_j)).copy_from(&jblk);
            a0.view_mut((n_j, n_j), (n_n, n_n))
                .copy_from(&DMatrix::identity(n_n, n_n));
            let e = &sinv * e0 * &tinv;
            let a = &sinv * a0 * &tinv;
            let p = Pencil::new(sp_from_dense(&e), sp_from_dense(&a)).unwrap();
            let core = QwfCore::build(&p, default_rank_tol(n)).unwrap();
            assert_eq!(core.n_j, n_j, "trial {trial}");
            let dq = core.densify();
            let set = &dq.s * &e * &dq.t;
            let sat = &dq.s * &a * &dq.t;
            let mut expect_e = DMatrix::zeros(n, n);
            expect_e
                .view_mut((0, 0), (n_j, n_j))
                .copy_from(&DMatrix::identity(n_j, n_j));
            expect_e
                .view_mut((n_j, n_j), (n_n, n_n))
                .copy_from(&dq.n_block);
            let mut expect_a = DMatrix::zeros(n, n);
            expect_a.view_mut((0, 0), (n_j, n_j)).copy_from(&dq.j);
            expect_a
                .view_mut((n_j, n_j), (n_n, n_n))
                .copy_from(&DMatrix::identity(n_n, n_n));
            let scale = e.norm() + a.norm();
            let resid = (set - expect_e).norm() + (sat - expect_a).norm();
            assert!(
                resid <= 1e-9 * scale,
                "trial {trial}: reconstruction residual {resid:.3e} vs scale {scale:.3e}"
            );
        }
    }

    fn random_invertible(rng: &mut SplitMix64, n: usize) -> DMatrix<f64> {
        loop {
            let m = DMatrix::from_fn(n, n, |_, _| rng.normal());
            if m.determinant().abs() > 1e-3 {
                return m;
            }
        }
    }

    #[test]
    fn projector_idempotence_and_adiff_pi() {
        let mut rng = SplitMix64::new(23);
        let n = 7;
        // index-2-ish structural pencil
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n - 2 {
            e[(i, i)] = 1.0 + rng.next_f64();
        }
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * 3.0;
        let p = Pencil::from_dense(&e, &a).unwrap();
        let core = QwfCore::build(&p, default_rank_tol(n)).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(n, |_, _| rng.normal());
            let pix = core.pi(&x);
            let pipix = core.pi(&pix);
            assert!((&pipix - &pix).norm() <= 1e-10 * x.norm().max(1.0));
            // A^diff Π x = A^diff x
            let adiff = |v: &DVector<f64>| {
                let av = sparse::sp_mul_vec(&core.a, v);
                core.vhat_mul(&core.s_top(&av))
            };
            let lhs = adiff(&pix);
            let rhs = adiff(&x);
            assert!((lhs - rhs).norm() <= 1e-9 * x.norm().max(1.0));
        }
    }

    #[test]
    fn projector_independent_of_basis_choice() {
        // decompose, then decompose again with a rotated W-basis and
        // permuted complement; projector must agree
        let n = 6;
        let mut rng = SplitMix64::new(31);
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n - 2 {
            e[(i, i)] = 1.0 + rng.next_f64();
        }
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * 3.0;
        let p = Pencil::from_dense(&e, &a).unwrap();
        let (spaces, epinv, alu) = wong_spaces(&p, default_rank_tol(n)).unwrap();
        // rotate the bases by random orthogonal mixing
        let rot_w = orth(
            &(&spaces.what * random_invertible(&mut rng, spaces.what.ncols())),
            1e-13,
        );
        let rot_d = orth(
            &(&spaces.d * random_invertible(&mut rng, spaces.d.ncols())),
            1e-13,
        );
        let core1 = QwfCore::from_spaces(&p, spaces, epinv, alu, default_rank_tol(n)).unwrap();
        let (_, epinv2, alu2) = wong_spaces(&p, default_rank_tol(n)).unwrap();
        let spaces2 = WongSpaces {
            d: rot_d,
            what: rot_w,
            used_shortcut: false,
        };
        let core2 = QwfCore::from_spaces(&p, spaces2, epinv2, alu2, default_rank_tol(n)).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(n, |_, _| rng.normal());
            assert!((core1.pi(&x) - core2.pi(&x)).norm() <= 1e-9 * x.norm());
            let ad1 = core1.vhat_mul(&core1.s_top(&sparse::sp_mul_vec(&core1.a, &x)));
            let ad2 = core2.vhat_mul(&core2.s_top(&sparse::sp_mul_vec(&core2.a, &x)));
            assert!((ad1 - ad2).norm() <= 1e-9 * x.norm().max(1.0));
        }
    }

    #[test]
    fn e_imp_nilpotent() {
        let p = pencil_dense(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 2);
        let core = QwfCore::build(&p, default_rank_tol(2)).unwrap();
        let nu = core.nilpotency_index(default_rank_tol(2)).unwrap();
        assert_eq!(nu, 2);
        let dq = core.densify();
        let mut pow = DMatrix::identity(2, 2);
        for _ in 0..nu {
            pow = &pow * &dq.e_imp;
        }
        assert!(pow.norm() < 1e-12);
    }
}
