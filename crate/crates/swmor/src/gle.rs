//! Generalized Lyapunov equation solver with certified error radii.
//!
//! Solves 𝒜 X + X 𝒜ᵀ + Σ_j ℱ_j X ℱ_jᵀ + Σ_j ℬ_j ℬ_jᵀ = 0 by a stationary
//! iteration: each sweep freezes the ℱ-terms at the previous low-rank
//! iterate and solves a standard Lyapunov equation by Galerkin projection
//! onto a block Krylov subspace. The matrices enter only through
//! matrix-vector products (plus solves for the spectral estimate), so both
//! dense blocks and the implicit jump-flow operators plug in. Every run
//! returns a rigorous bound on ‖X − Z Zᵀ‖₂ assembled from the cheap
//! residual identity and the factor-difference estimate.

use crate::densela;
use crate::lyapunov::{solve_lyapunov_dense, LyapunovError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GleError {
    #[error("scaling offset delta must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("Krylov basis reached max dimension {0} before meeting the residual tolerance")]
    MaxDimExceeded(usize),
    #[error("inner residual stagnated for {0} consecutive block steps")]
    Stagnation(usize),
    #[error("stationary iteration did not converge within {0} outer sweeps")]
    NotConverged(usize),
    #[error("error bound requires at least two completed outer iterations")]
    InsufficientHistory,
    #[error("spectral estimate failed: operator solve unavailable")]
    NoSolve,
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

/// Linear operator interface for the solver: products with the matrix and
/// its transpose, optionally solves for the smallest-singular-value probe.
pub trait MatOp {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_t(&self, x: &DVector<f64>) -> DVector<f64>;
    /// x ↦ M⁻¹x when available.
    fn solve(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    /// x ↦ M⁻ᵀx when available.
    fn solve_t(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.apply(&x.column(j).into_owned()));
        }
        out
    }
    fn apply_t_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.apply_t(&x.column(j).into_owned()));
        }
        out
    }
    /// Densify by applying to unit vectors (desk scale).
    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
        }
        out
    }
}

/// Dense-matrix operator.
pub struct DenseOp {
    pub m: DMatrix<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    lu_t: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl DenseOp {
    pub fn new(m: DMatrix<f64>) -> Self {
        let lu = Some(m.clone().lu());
        let lu_t = Some(m.transpose().lu());
        Self { m, lu, lu_t }
    }
}

impl MatOp for DenseOp {
    fn dim(&self) -> usize {
        self.m.nrows()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x
    }
    fn apply_t(&self, x: &DVector<f64>) -> DVector<f64> {
        self.m.transpose() * x
    }
    fn solve(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.lu.as_ref().and_then(|lu| lu.solve(x))
    }
    fn solve_t(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.lu_t.as_ref().and_then(|lu| lu.solve(x))
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.m.clone()
    }
}

/// The generalized Lyapunov problem (𝒜, {ℱ_j}, {ℬ_j}) with its scaling
/// record.
pub struct GleProblem<'a> {
    pub acal: &'a dyn MatOp,
    pub fcal: Vec<&'a dyn MatOp>,
    /// right-hand-side factors, each n×m_j
    pub bcal: Vec<DMatrix<f64>>,
    pub sigma_min_a: f64,
    /// β of the scaling bound: Σ σ₁(ℱ_j)² / (2 σ_min(𝒜))
    pub beta: f64,
    /// ℱ and ℬ divided by sqrt(beta + delta) when scaled
    pub scale_factor: f64,
    pub scaled: bool,
}

/// Estimate σ_min via inverse power iteration on 𝒜ᵀ𝒜 (falls back to dense
/// SVD when solves are unavailable and the operator is small).
pub fn estimate_sigma_min(op: &dyn MatOp, rel_tol: f64, max_iter: usize) -> Result<f64, GleError> {
    let n = op.dim();
    if n == 0 {
        return Ok(0.0);
    }
    if op.solve(&DVector::zeros(n)).is_none() {
        let d = op.to_dense();
        return Ok(densela::sigma_min(&d));
    }
    let mut rng = crate::rng::SplitMix64::new(0x5163_3A11);
    let mut v = DVector::from_fn(n, |_, _| rng.normal());
    v /= v.norm();
    let mut est = 0.0_f64;
    for _ in 0..max_iter {
        let w = op.solve(&v).ok_or(GleError::NoSolve)?;
        let u = op.solve_t(&w).ok_or(GleError::NoSolve)?;
        let lambda = u.norm();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let new_est = 1.0 / lambda.sqrt();
        let done = (new_est - est).abs() <= rel_tol * new_est;
        est = new_est;
        v = u / lambda;
        if done {
            break;
        }
    }
    Ok(est)
}

/// Largest singular value via power iteration on MᵀM.
pub fn estimate_sigma_max(op: &dyn MatOp, rel_tol: f64, max_iter: usize) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut rng = crate::rng::SplitMix64::new(0x5163_3A22);
    let mut v = DVector::from_fn(n, |_, _| rng.normal());
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;
    let mut est = 0.0_f64;
    for _ in 0..max_iter {
        let u = op.apply_t(&op.apply(&v));
        let lambda = u.norm();
        if lambda == 0.0 {
            return 0.0;
        }
        let new_est = lambda.sqrt();
        let done = (new_est - est).abs() <= rel_tol * new_est;
        est = new_est;
        v = u / lambda;
        if done {
            break;
        }
    }
    est
}

/// β = Σ_j σ₁(ℱ_j)² / (2 σ_min(𝒜)): the computable bound on ‖ℒ⁻¹Π‖₂.
pub fn beta_bound(sigma_min_a: f64, fcal: &[&dyn MatOp]) -> f64 {
    if sigma_min_a <= 0.0 {
        return f64::INFINITY;
    }
    let sum: f64 = fcal
        .iter()
        .map(|f| estimate_sigma_max(*f, 1e-8, 500).powi(2))
        .sum();
    sum / (2.0 * sigma_min_a)
}

/// Measure ‖ℒ⁻¹Π‖₂ directly by power iteration on the vectorized map,
/// each application being one dense Lyapunov solve. Desk-scale only: the
/// β bound replaces this on large problems.
pub fn measure_l_inv_pi_norm(
    acal: &dyn MatOp,
    fcal: &[&dyn MatOp],
    iters: usize,
) -> Result<f64, GleError> {
    let n = acal.dim();
    if n == 0 || fcal.is_empty() {
        return Ok(0.0);
    }
    let a = acal.to_dense();
    let fd: Vec<DMatrix<f64>> = fcal.iter().map(|f| f.to_dense()).collect();
    if fd.iter().all(|f| f.norm() == 0.0) {
        return Ok(0.0);
    }
    let cache = crate::lyapunov::LyapSchur::new(&a)?;
    let apply = |x: &DMatrix<f64>| -> Result<DMatrix<f64>, GleError> {
        let mut w = DMatrix::zeros(n, n);
        for f in &fd {
            w += f * x * f.transpose();
        }
        Ok(cache.solve(&(-w))?)
    };
    let apply_t = |x: &DMatrix<f64>| -> Result<DMatrix<f64>, GleError> {
        let y = cache.solve_transposed(&(-x.clone()))?;
        let mut w = DMatrix::zeros(n, n);
        for f in &fd {
            w += f.transpose() * &y * f;
        }
        Ok(w)
    };
    let mut rng = crate::rng::SplitMix64::new(0x11_4E57);
    let mut x = DMatrix::from_fn(n, n, |_, _| rng.normal());
    x /= x.norm();
    let mut est = 0.0_f64;
    for it in 0..iters {
        if std::env::var("SWMOR_DEBUG").is_ok() {
            eprintln!("[eta] iter {it} est {est:.4e}");
        }
        let y = apply_t(&apply(&x)?)?;
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let new_est = norm.sqrt();
        let done = (new_est - est).abs() <= 1e-4 * new_est;
        est = new_est;
        x = y / norm;
        if done {
            break;
        }
    }
    Ok(est)
}

impl<'a> GleProblem<'a> {
    pub fn new(
        acal: &'a dyn MatOp,
        fcal: Vec<&'a dyn MatOp>,
        bcal: Vec<DMatrix<f64>>,
    ) -> Result<Self, GleError> {
        let sigma_min_a = estimate_sigma_min(acal, 1e-6, 500)?;
        let beta = beta_bound(sigma_min_a, &fcal);
        Ok(Self {
            acal,
            fcal,
            bcal,
            sigma_min_a,
            beta,
            scale_factor: 1.0,
            scaled: false,
        })
    }

    /// Divide ℱ_j and ℬ_j by sqrt(β + δ). With δ = β the bound on
    /// ‖ℒ⁻¹Π‖₂ becomes β/(β+δ) = 1/2 and γ ≤ 1. Rescaling changes the
    /// solution but not its column space.
    pub fn scale(self, delta: f64) -> Result<Self, GleError> {
        let beta = self.beta;
        self.scale_with(beta, delta)
    }

    /// Rescale with an explicit estimate of ‖ℒ⁻¹Π‖₂ in place of β — used
    /// when the norm has been measured directly and the β bound would be
    /// needlessly conservative.
    pub fn scale_with(mut self, norm_estimate: f64, delta: f64) -> Result<Self, GleError> {
        if delta <= 0.0 {
            return Err(GleError::NonPositiveDelta(delta));
        }
        let factor = (norm_estimate + delta).sqrt();
        if factor > 0.0 && factor.is_finite() {
            self.scale_factor = factor;
            for b in &mut self.bcal {
                *b /= factor;
            }
            self.scaled = true;
        }
        Ok(self)
    }

    fn f_apply_mat(&self, j: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let raw = self.fcal[j].apply_mat(x);
        if self.scaled {
            raw / self.scale_factor
        } else {
            raw
        }
    }
}

/// Low-rank Gramian factor with its certificate.
pub struct LowRankGramian {
    /// X ≈ Z Zᵀ
    pub z: DMatrix<f64>,
    /// certified bound on ‖X − Z Zᵀ‖₂
    pub err_radius: f64,
    pub iterations: usize,
    /// Frobenius residual of the inner Lyapunov solve per outer sweep
    pub inner_residuals: Vec<f64>,
    /// per-sweep Krylov basis dimension
    pub basis_dims: Vec<usize>,
    /// γ used in the reported bound
    pub gamma: f64,
    /// scale applied to the ℱ/ℬ data (β + δ)^{1/2}; Z reconstructs the
    /// solution of the problem with rescaled ℱ and the original ℬ after
    /// multiplying by this factor
    pub scale_factor: f64,
    /// ‖Z‖₂ normalization applied after convergence (see balancing)
    pub normalization: f64,
}

/// Inner Lyapunov solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSolver {
    /// Galerkin projection on a polynomial block Krylov subspace.
    Krylov,
    /// Dense Schur-based solve (desk scale, used by the monotonicity
    /// analysis).
    Dense,
}

/// Options for the stationary iteration.
pub struct GleOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub max_krylov_dim: usize,
    pub inner: InnerSolver,
    /// rank-truncation threshold for factor deflation (defaults to tol)
    pub trunc_tol: f64,
    pub stall_limit: usize,
}

impl GleOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            max_outer: 200,
            max_krylov_dim: 2000,
            inner: InnerSolver::Krylov,
            trunc_tol: tol,
            stall_limit: 10,
        }
    }

    pub fn with_inner(mut self, inner: InnerSolver) -> Self {
        self.inner = inner;
        self
    }
}

/// Bound ‖X_ℓ − X‖₂ ≤ ‖R_ℓ‖_F / (2 σ_min(𝒜)) for an approximate Lyapunov
/// solution with residual R_ℓ.
pub fn lyap_error_bound(res_fro: f64, sigma_min_a: f64) -> f64 {
    res_fro / (2.0 * sigma_min_a)
}

/// Result of one inner Lyapunov solve.
pub struct InnerSolution {
    pub z: DMatrix<f64>,
    pub res_fro: f64,
    pub basis_dim: usize,
}

/// Solve 𝒜 X + X 𝒜ᵀ + B Bᵀ = 0 by Galerkin projection on the block Krylov
/// space K_ℓ(𝒜, B) with full re-orthogonalization and rank-revealing
/// deflation. Stops when the cheap residual ‖R_ℓ‖_F = 2‖Ṽᵀ𝒜V Y‖_F drops
/// below `tol_res`.
pub fn solve_lyapunov_galerkin(
    acal: &dyn MatOp,
    b_block: &DMatrix<f64>,
    tol_res: f64,
    max_dim: usize,
    trunc_tol: f64,
    stall_limit: usize,
) -> Result<InnerSolution, GleError> {
    let n = acal.dim();
    if b_block.norm() == 0.0 {
        return Ok(InnerSolution {
            z: DMatrix::zeros(n, 0),
            res_fro: 0.0,
            basis_dim: 0,
        });
    }
    // initial block: orthonormalized B
    let mut basis = orth_block(&b_block.clone(), None, 1e-13);
    if basis.ncols() == 0 {
        return Ok(InnerSolution {
            z: DMatrix::zeros(n, 0),
            res_fro: 0.0,
            basis_dim: 0,
        });
    }
    let mut fresh = basis.clone();
    let mut best_res = f64::INFINITY;
    let mut stall = 0;
    // the projected solve is the expensive step; check on a growing
    // schedule so saturating runs do O(log) solves instead of one per block
    let mut next_check = basis.ncols();
    loop {
        // extend the basis until the next scheduled residual check
        while basis.ncols() < next_check.min(max_dim) {
            let next = acal.apply_mat(&fresh);
            let new_cols = orth_block(&next, Some(&basis), 1e-13);
            if new_cols.ncols() == 0 {
                break;
            }
            basis = densela::hcat(&basis, &new_cols);
            fresh = new_cols;
        }
        if std::env::var("SWMOR_DEBUG").is_ok() {
            eprintln!("[krylov] basis {} fresh {}", basis.ncols(), fresh.ncols());
        }
        // projected equation on the current basis
        let av = acal.apply_mat(&basis);
        let a_proj = basis.transpose() * &av;
        let b_proj = basis.transpose() * b_block;
        let w_proj = &b_proj * b_proj.transpose();
        let y = solve_lyapunov_dense(&a_proj, &w_proj)?;

        // extend the basis with the next block A·fresh
        let next = acal.apply_mat(&fresh);
        let new_cols = orth_block(&next, Some(&basis), 1e-13);

        // cheap residual: the projected residual is [[0, Mᵀ],[M, 0]] with
        // M = Ṽᵀ(A V)Y, so ‖R‖_F = √2·‖M‖_F exactly
        let res_fro = if new_cols.ncols() == 0 {
            0.0
        } else {
            2f64.sqrt() * (new_cols.transpose() * &av * &y).norm()
        };

        let done = res_fro <= tol_res || new_cols.ncols() == 0;
        if done {
            let z = factor_from_projected(&basis, &y, trunc_tol);
            return Ok(InnerSolution {
                z,
                res_fro,
                basis_dim: basis.ncols(),
            });
        }
        // stagnation: non-improving residual while deflation is already
        // eating the new blocks (a plateau with full fresh blocks still
        // arriving resolves itself at saturation)
        if res_fro >= best_res * (1.0 - 1e-12) && new_cols.ncols() < fresh.ncols() {
            stall += 1;
            if stall >= stall_limit {
                return Err(GleError::Stagnation(stall_limit));
            }
        } else {
            stall = 0;
            best_res = best_res.min(res_fro);
        }
        if basis.ncols() + new_cols.ncols() > max_dim {
            return Err(GleError::MaxDimExceeded(max_dim));
        }
        basis = densela::hcat(&basis, &new_cols);
        fresh = new_cols;
        next_check = basis.ncols() + (basis.ncols() / 2).max(1);
    }
}

/// Z = V U₁ Σ₁^{1/2} from the eigendecomposition of the projected solution,
/// truncated at `trunc_tol` (absolute, matching the certificate convention).
/// Columns are ordered by decreasing eigenvalue and sign-normalized so the
/// factor difference between consecutive sweeps measures actual change
/// rather than eigenvector sign flips.
fn factor_from_projected(basis: &DMatrix<f64>, y: &DMatrix<f64>, trunc_tol: f64) -> DMatrix<f64> {
    let sym = (y + y.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut cols: Vec<(f64, usize)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // relative cutoff: with the factors normalized downstream, truncating
    // at tol relative to the top eigenvalue realizes the ||Z-pinv|| ~
    // 1/sqrt(tol) convention independently of problem rescaling
    let lmax = cols.first().map(|c| c.0).unwrap_or(0.0).max(0.0);
    let kept: Vec<usize> = cols
        .iter()
        .filter(|(l, _)| *l > trunc_tol * lmax && *l > 0.0)
        .map(|&(_, i)| i)
        .collect();
    let mut z = DMatrix::zeros(basis.nrows(), kept.len());
    for (c, &i) in kept.iter().enumerate() {
        let dir = basis * eig.eigenvectors.column(i);
        z.set_column(c, &(dir * eig.eigenvalues[i].sqrt()));
    }
    canonical_column_signs(&mut z);
    z
}

/// Flip column signs so the entry of largest magnitude is positive.
fn canonical_column_signs(z: &mut DMatrix<f64>) {
    for j in 0..z.ncols() {
        let mut best = 0;
        let mut best_abs = 0.0;
        for i in 0..z.nrows() {
            let a = z[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if z[(best, j)] < 0.0 {
            z.column_mut(j).neg_mut();
        }
    }
}

/// Orthonormalize `block` against `against` (twice, for stability) and
/// internally. A column is deflated when orthogonalization removes all but
/// a `tol`-relative remnant of it — the remnant is numerical noise, not a
/// new direction.
fn orth_block(
    block: &DMatrix<f64>,
    against: Option<&DMatrix<f64>>,
    tol: f64,
) -> DMatrix<f64> {
    let n = block.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let existing = against.map(|v| v.ncols()).unwrap_or(0);
    for j in 0..block.ncols() {
        if existing + cols.len() >= n {
            break;
        }
        let mut v = block.column(j).into_owned();
        let pre_norm = v.norm();
        if pre_norm == 0.0 {
            continue;
        }
        for _ in 0..2 {
            if let Some(q) = against {
                if q.ncols() > 0 {
                    v -= q * (q.transpose() * &v);
                }
            }
            for q in &cols {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > tol.max(1e-12) * pre_norm {
            cols.push(v / norm);
        }
    }
    let mut out = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Certified error bound for the stationary iteration (γ, factor norms,
/// factor difference, residual history):
/// γ(‖Z_k‖_F + ‖Z_{k−1}‖_F)‖Z_k − Z_{k−1}‖_F
///   + ((1+γ)‖R_k‖_F + γ‖R_{k−1}‖_F)/(2σ_min(𝒜)).
pub fn gle_error_bound(
    z_k: &DMatrix<f64>,
    z_prev: &DMatrix<f64>,
    res_k: f64,
    res_prev: f64,
    sigma_min_a: f64,
    gamma: f64,
) -> f64 {
    let diff = factor_difference_norm(z_k, z_prev);
    gamma * (z_k.norm() + z_prev.norm()) * diff
        + ((1.0 + gamma) * res_k + gamma * res_prev) / (2.0 * sigma_min_a)
}

/// ‖Z_k − Z_{k−1}‖_F with zero-column padding so the shapes conform.
pub fn factor_difference_norm(z_k: &DMatrix<f64>, z_prev: &DMatrix<f64>) -> f64 {
    let cols = z_k.ncols().max(z_prev.ncols());
    let mut acc = 0.0;
    for j in 0..cols {
        for i in 0..z_k.nrows() {
            let a = if j < z_k.ncols() { z_k[(i, j)] } else { 0.0 };
            let b = if j < z_prev.ncols() { z_prev[(i, j)] } else { 0.0 };
            acc += (a - b) * (a - b);
        }
    }
    acc.sqrt()
}

/// Stationary iteration for the GLE. The problem should be scaled so that
/// the contraction bound holds (γ is treated as 1 in stopping thresholds,
/// which is exact after δ = β scaling).
pub fn stationary_solve_gle(
    problem: &GleProblem,
    opts: &GleOptions,
) -> Result<LowRankGramian, GleError> {
    let n = problem.acal.dim();
    let sigma_min = problem.sigma_min_a;
    let tol_res_inner = sigma_min * opts.tol / 3.0;
    let gamma = 1.0;

    // B̃₁ = [ℬ₁, …, ℬ_M]
    let mut b1_cols = 0;
    for b in &problem.bcal {
        b1_cols += b.ncols();
    }
    let mut b1 = DMatrix::zeros(n, b1_cols);
    {
        let mut at = 0;
        for b in &problem.bcal {
            b1.columns_mut(at, b.ncols()).copy_from(b);
            at += b.ncols();
        }
    }

    let mut z_prev: DMatrix<f64> = DMatrix::zeros(n, 0);
    let mut res_prev = 0.0;
    let mut inner_residuals = Vec::new();
    let mut basis_dims = Vec::new();
    let mut best_diff = f64::INFINITY;
    let mut diff_stall = 0usize;
    let all_f_zero = problem.fcal.is_empty()
        || problem
            .fcal
            .iter()
            .all(|f| estimate_sigma_max(*f, 1e-6, 50) == 0.0);

    let solve_inner = |rhs: &DMatrix<f64>| -> Result<InnerSolution, GleError> {
        match opts.inner {
            InnerSolver::Krylov => solve_lyapunov_galerkin(
                problem.acal,
                rhs,
                tol_res_inner,
                opts.max_krylov_dim,
                opts.trunc_tol,
                opts.stall_limit,
            ),
            InnerSolver::Dense => {
                let a = problem.acal.to_dense();
                let x = solve_lyapunov_dense(&a, &(rhs * rhs.transpose()))?;
                let z = factor_from_projected(&DMatrix::identity(n, n), &x, opts.trunc_tol);
                Ok(InnerSolution {
                    z,
                    res_fro: 0.0,
                    basis_dim: n,
                })
            }
        }
    };

    for k in 1..=opts.max_outer {
        // B̃_k = [ℱ₁ Z_{k−1}, …, ℱ_M Z_{k−1}, B̃₁], with pre-deflation of the
        // ℱ-blocks to keep the inner dimension bounded
        let rhs = if k == 1 {
            b1.clone()
        } else {
            if std::env::var("SWMOR_DEBUG").is_ok() {
                eprintln!("[gle] sweep {k}: building rhs from {} cols", z_prev.ncols());
            }
            let mut blocks: Vec<DMatrix<f64>> = Vec::new();
            for j in 0..problem.fcal.len() {
                if z_prev.ncols() > 0 {
                    blocks.push(problem.f_apply_mat(j, &z_prev));
                }
            }
            let mut fz = DMatrix::zeros(n, blocks.iter().map(|b| b.ncols()).sum());
            let mut at = 0;
            for b in &blocks {
                fz.columns_mut(at, b.ncols()).copy_from(b);
                at += b.ncols();
            }
            if std::env::var("SWMOR_DEBUG").is_ok() {
                eprintln!(
                    "[gle] sweep {k}: fz {}x{} finite {} norm {:.3e}",
                    fz.nrows(),
                    fz.ncols(),
                    fz.iter().all(|v| v.is_finite()),
                    fz.norm()
                );
            }
            let fz = deflate_columns(&fz, opts.trunc_tol);
            if std::env::var("SWMOR_DEBUG").is_ok() {
                eprintln!("[gle] sweep {k}: deflated to {} cols", fz.ncols());
            }
            densela::hcat(&fz, &b1)
        };

        let inner = solve_inner(&rhs)?;
        inner_residuals.push(inner.res_fro);
        basis_dims.push(inner.basis_dim);
        let z_k = deflate_columns(&inner.z, 0.0);

        // outer stop: (‖Z_k‖ + ‖Z_{k−1}‖)·‖Z_k − Z_{k−1}‖ ≤ tol/2, or a
        // contraction stalled at the numerical floor — the reported radius
        // reflects whatever was actually achieved, so accepting a stalled
        // iterate keeps the certificate honest while avoiding a futile grind
        let diff_term = (z_k.norm() + z_prev.norm()) * factor_difference_norm(&z_k, &z_prev);
        if std::env::var("SWMOR_DEBUG").is_ok() {
            eprintln!(
                "[gle] sweep {k}: rhs_cols {} basis {} res {:.3e} rank {} diff {:.3e}",
                rhs.ncols(),
                inner.basis_dim,
                inner.res_fro,
                z_k.ncols(),
                diff_term
            );
        }
        let stalled = if diff_term > best_diff * 0.9 && diff_term < best_diff * 10.0 {
            diff_stall += 1;
            diff_stall >= 8
        } else {
            if diff_term < best_diff {
                best_diff = diff_term;
            }
            diff_stall = 0;
            false
        };
        if k >= 2 && (diff_term <= opts.tol / 2.0 || stalled) {
            let err_radius = gle_error_bound(&z_k, &z_prev, inner.res_fro, res_prev, sigma_min, gamma);
            return Ok(LowRankGramian {
                z: z_k,
                err_radius,
                iterations: k,
                inner_residuals,
                basis_dims,
                gamma,
                scale_factor: problem.scale_factor,
                normalization: 1.0,
            });
        }
        // degenerate case: no ℱ-terms means the first sweep is exact
        if all_f_zero {
            let err_radius = lyap_error_bound(inner.res_fro, sigma_min);
            return Ok(LowRankGramian {
                z: z_k,
                err_radius,
                iterations: k,
                inner_residuals,
                basis_dims,
                gamma,
                scale_factor: problem.scale_factor,
                normalization: 1.0,
            });
        }
        z_prev = z_k;
        res_prev = inner.res_fro;
    }
    Err(GleError::NotConverged(opts.max_outer))
}

/// Drop trailing singular directions of a factor: Z ← U₁ Σ₁ from the SVD of
/// Z, keeping singular values with σ² > trunc_tol. Signs are canonicalized
/// for the same reason as in the factor construction.
fn deflate_columns(z: &DMatrix<f64>, trunc_tol: f64) -> DMatrix<f64> {
    if z.ncols() == 0 {
        return z.clone();
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let kept = svd
        .singular_values
        .iter()
        .filter(|&&s| s * s > trunc_tol * smax * smax && s > 0.0)
        .count();
    let mut out = DMatrix::zeros(z.nrows(), kept);
    for j in 0..kept {
        out.set_column(j, &(u.column(j) * svd.singular_values[j]));
    }
    canonical_column_signs(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_op(v: f64) -> DenseOp {
        DenseOp::new(DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn scale_beta_closed_form() {
        // scalar A = -2, one F = 1: sigma_min = 2, beta = 1/(2*2) = 0.25
        let a = scalar_op(-2.0);
        let f = scalar_op(1.0);
        let p = GleProblem::new(&a, vec![&f], vec![DMatrix::from_element(1, 1, 1.0)]).unwrap();
        assert!((p.sigma_min_a - 2.0).abs() < 1e-6);
        assert!((p.beta - 0.25).abs() < 1e-6);
        // delta = beta: bound on ||L^{-1} Pi|| becomes 1/2
        let scaled = p.scale(0.25).unwrap();
        assert!(scaled.scaled);
        let bound = scaled.beta / (scaled.beta + 0.25);
        assert!((bound - 0.5).abs() < 1e-6);
    }

    #[test]
    fn scale_with_zero_f() {
        let a = scalar_op(-2.0);
        let p = GleProblem::new(&a, vec![], vec![DMatrix::from_element(1, 1, 1.0)]).unwrap();
        assert_eq!(p.beta, 0.0);
        let scaled = p.scale(1.0).unwrap();
        // beta = 0, delta = 1: divide by 1
        assert!((scaled.scale_factor - 1.0).abs() < 1e-12);
        assert!(scaled.scale(0.0).is_err());
    }

    #[test]
    fn lyap_bound_examples() {
        assert_eq!(lyap_error_bound(0.0, 1.0), 0.0);
        assert!((lyap_error_bound(2.0, 4.0) - 0.25).abs() < 1e-15);
        // scalar A = -1, X = 1, X_l = 1.1: R = -0.2, bound = 0.1 (tight)
        let r: f64 = -1.0f64 * 1.1 + 1.1 * (-1.0) + 2.0;
        assert!((lyap_error_bound(r.abs(), 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn galerkin_scalar_exact() {
        // A=-1, B=sqrt(2): X = 1, residual 0 at l = 1
        let a = scalar_op(-1.0);
        let b = DMatrix::from_element(1, 1, 2f64.sqrt());
        let sol = solve_lyapunov_galerkin(&a, &b, 1e-12, 10, 1e-14, 10).unwrap();
        let x = &sol.z * sol.z.transpose();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(sol.res_fro <= 1e-12);
    }

    #[test]
    fn galerkin_diagonal_closed_form() {
        // A = diag(-1,-2), B = [1;0] -> X = diag(1/2, 0)
        let a = DenseOp::new(DMatrix::from_partial_diagonal(2, 2, &[-1.0, -2.0]));
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let sol = solve_lyapunov_galerkin(&a, &b, 1e-12, 10, 1e-15, 10).unwrap();
        let x = &sol.z * sol.z.transpose();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(x[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn galerkin_matches_dense_on_random_instance() {
        let mut rng = crate::rng::SplitMix64::new(77);
        let n = 24;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (1.5 * n as f64);
        let b = DMatrix::from_fn(n, 2, |_, _| rng.normal());
        let op = DenseOp::new(a.clone());
        let sol = solve_lyapunov_galerkin(&op, &b, 1e-12, 200, 1e-16, 10).unwrap();
        let x = &sol.z * sol.z.transpose();
        let x_ref = solve_lyapunov_dense(&a, &(&b * b.transpose())).unwrap();
        assert!((x - &x_ref).norm() <= 1e-9 * x_ref.norm().max(1.0));
    }

    #[test]
    fn residual_identity_against_dense_assembly() {
        let mut rng = crate::rng::SplitMix64::new(99);
        let n = 40;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (2.0 * n as f64);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.normal());
        let op = DenseOp::new(a.clone());
        // force an early stop at a loose tolerance so the residual is nonzero
        let sol = solve_lyapunov_galerkin(&op, &b, 1e-2, 200, 1e-16, 10).unwrap();
        let x = &sol.z * sol.z.transpose();
        let dense_res = (&a * &x + &x * a.transpose() + &b * b.transpose()).norm();
        assert!(
            (sol.res_fro - dense_res).abs() <= 1e-8 * dense_res.max(1e-30),
            "cheap {} vs dense {}",
            sol.res_fro,
            dense_res
        );
    }

    #[test]
    fn gle_bound_arithmetic() {
        // gamma = 1/3, norms 1, diff 0.03, residuals 0 -> 0.02
        let z_k = DMatrix::from_element(1, 1, 1.0);
        let z_p = DMatrix::from_element(1, 1, 0.97);
        let diff = factor_difference_norm(&z_k, &z_p);
        assert!((diff - 0.03).abs() < 1e-12);
        let b = gle_error_bound(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            0.0,
            0.0,
            1.0,
            1.0 / 3.0,
        );
        // norms are both 1, diff is 0 here; construct the spec arithmetic
        assert!(b.abs() < 1e-15);
        let manual: f64 = (1.0 / 3.0) * (1.0 + 1.0) * 0.03;
        assert!((manual - 0.02).abs() < 1e-12);
    }

    #[test]
    fn stationary_scalar_fixed_point() {
        // A = -2, F = {0, 1}, B = {1, 0}: exact X = 1/3,
        // iterates x_k = (1 + x_{k-1})/4 increase monotonically
        let a = scalar_op(-2.0);
        let f0 = scalar_op(0.0);
        let f1 = scalar_op(1.0);
        let p = GleProblem::new(
            &a,
            vec![&f0, &f1],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)],
        )
        .unwrap();
        // beta = 1/4 < 1: no scaling needed for convergence
        let opts = GleOptions::new(1e-10);
        let g = stationary_solve_gle(&p, &opts).unwrap();
        let x = (&g.z * g.z.transpose())[(0, 0)];
        assert!((x - 1.0 / 3.0).abs() <= 1e-9, "x = {x}");
        assert!(g.err_radius >= (x - 1.0 / 3.0).abs());
    }

    #[test]
    fn stationary_no_f_terminates_first_sweep() {
        let a = DenseOp::new(DMatrix::from_partial_diagonal(3, 3, &[-1.0, -2.0, -3.0]));
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        let p = GleProblem::new(&a, vec![], vec![b.clone()]).unwrap();
        let opts = GleOptions::new(1e-10);
        let g = stationary_solve_gle(&p, &opts).unwrap();
        assert_eq!(g.iterations, 1);
        let x = &g.z * g.z.transpose();
        let x_ref = solve_lyapunov_dense(&a.m, &(&b * b.transpose())).unwrap();
        assert!((x - x_ref).norm() < 1e-9);
    }

    #[test]
    fn factor_difference_pads_columns() {
        let z1 = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let z2 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!((factor_difference_norm(&z1, &z2) - 1.0).abs() < 1e-14);
    }
}
