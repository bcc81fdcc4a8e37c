//! Reformulation of a switched DAE as a switched ODE with state jumps.
//!
//! Each mode runs in its own differential coordinates (dimension n_{J_j});
//! switching applies a rectangular transition map plus an input-derivative
//! jump term when the mode being left carries impulse content. Feedthrough
//! of input derivatives and symbolic Dirac coefficients complete the
//! input-output equivalence with the original switched DAE.

use crate::qwf::{self, ModeDecomposition, ProjectorSet};
use crate::system::{SwitchedSystem, SystemError};
use nalgebra::{DMatrix, DVector};

/// One decomposed mode with its reduced-coordinate maps.
pub struct JumpFlowMode {
    pub decomp: ModeDecomposition,
    pub proj: ProjectorSet,
}

impl JumpFlowMode {
    pub fn n_j(&self) -> usize {
        self.decomp.core.n_j
    }

    pub fn nu(&self) -> usize {
        self.decomp.nu
    }

    /// Input-to-algebraic chain matrices (E^imp)^i B^imp = Ŵ N^i [0 I] S B
    /// for i = 0..ν-1 (full state space, n×m each).
    pub fn impulse_chain(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        let mut npow_b = self.proj.b_imp_coords.clone();
        for _ in 0..self.nu() {
            out.push(self.decomp.core.what() * &npow_b);
            npow_b = &self.decomp.core.n_block * npow_b;
        }
        out
    }

    /// Densified slow dynamics J (n_J×n_J); desk-scale use.
    pub fn j_dense(&self) -> DMatrix<f64> {
        let n_j = self.n_j();
        let mut j = DMatrix::zeros(n_j, n_j);
        for i in 0..n_j {
            let mut e = DVector::zeros(n_j);
            e[i] = 1.0;
            j.set_column(i, &self.decomp.core.j_mul(&e));
        }
        j
    }
}

/// The switched-ODE-with-jumps form of a switched DAE.
pub struct JumpFlowForm {
    pub modes: Vec<JumpFlowMode>,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl JumpFlowForm {
    /// P_{j,k} v = [I 0] T_j⁻¹ T_k [I;0]ᵀ v — transition from mode-k to
    /// mode-j differential coordinates.
    pub fn p_apply(&self, j: usize, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let lifted = self.modes[k].decomp.core.vhat_mul(v);
        self.modes[j].decomp.core.y1(&lifted)
    }

    /// P_{j,k}ᵀ v.
    pub fn p_apply_t(&self, j: usize, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let jm = &self.modes[j].decomp.core;
        let km = &self.modes[k].decomp.core;
        km.vhat_t_mul(&jm.pi_t(&jm.vhat_mul(v)))
    }

    pub fn p_apply_mat(&self, j: usize, k: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.modes[j].n_j(), v.ncols());
        for c in 0..v.ncols() {
            out.set_column(c, &self.p_apply(j, k, &v.column(c).into_owned()));
        }
        out
    }

    pub fn p_apply_t_mat(&self, j: usize, k: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.modes[k].n_j(), v.ncols());
        for c in 0..v.ncols() {
            out.set_column(c, &self.p_apply_t(j, k, &v.column(c).into_owned()));
        }
        out
    }

    /// Dense P_{j,k} (desk-scale).
    pub fn p_dense(&self, j: usize, k: usize) -> DMatrix<f64> {
        let nk = self.modes[k].n_j();
        let mut out = DMatrix::zeros(self.modes[j].n_j(), nk);
        for c in 0..nk {
            let mut e = DVector::zeros(nk);
            e[c] = 1.0;
            out.set_column(c, &self.p_apply(j, k, &e));
        }
        out
    }

    /// Index of the mode with the largest differential dimension (ties:
    /// lowest index).
    pub fn leading_mode(&self) -> usize {
        let mut best = 0;
        for (j, md) in self.modes.iter().enumerate() {
            if md.n_j() > self.modes[best].n_j() {
                best = j;
            }
        }
        best
    }

    /// True when every mode has an empty impulse input map, making all
    /// feedthrough blocks and jump terms vanish.
    pub fn input_impulse_free(&self, tol: f64) -> bool {
        self.modes.iter().all(|m| {
            let scale = m.proj.b_imp_coords.norm();
            scale <= tol * (1.0 + m.proj.b_diff_coords.norm())
        })
    }
}

/// Decompose every mode of a switched DAE into jump-flow form.
pub fn reformulate_jumpflow(sys: &SwitchedSystem) -> Result<JumpFlowForm, SystemError> {
    let rank_tol = qwf::default_rank_tol(sys.n);
    let mut modes = Vec::with_capacity(sys.num_modes());
    for j in 0..sys.num_modes() {
        let pencil = sys.pencil(j);
        let (decomp, proj) = qwf::qwf_decompose(&pencil, &sys.modes[j].b, &sys.modes[j].c, rank_tol)
            .map_err(|e| SystemError::Mode(j, e))?;
        modes.push(JumpFlowMode { decomp, proj });
    }
    Ok(JumpFlowForm {
        modes,
        n: sys.n,
        m: sys.m,
        p: sys.p,
    })
}
