//! Switched descriptor system model and per-mode validation.

use crate::densela;
use crate::qwf::{self, Pencil, QwfError, DENSE_LIMIT};
use crate::sparse::SpMat;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default tolerance scale for the structural assumption checks.
pub const TOL_ASSUME: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("system must have at least one mode")]
    Empty,
    #[error("mode {0}: dimension mismatch")]
    DimensionMismatch(usize),
    #[error("mode {0}: {1}")]
    Mode(usize, QwfError),
    #[error("switching signal events must be strictly increasing")]
    NonMonotoneSignal,
    #[error("switching signal mode index {0} out of range (M = {1})")]
    BadModeIndex(usize, usize),
}

/// One mode of the switched system.
pub struct Mode {
    pub e: SpMat,
    pub a: SpMat,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// The switched descriptor system: M modes sharing state/input/output
/// dimensions.
pub struct SwitchedSystem {
    pub modes: Vec<Mode>,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl SwitchedSystem {
    pub fn new(modes: Vec<Mode>) -> Result<Self, SystemError> {
        let first = modes.first().ok_or(SystemError::Empty)?;
        let (n, m, p) = (first.e.nrows(), first.b.ncols(), first.c.nrows());
        for (j, mode) in modes.iter().enumerate() {
            let ok = mode.e.nrows() == n
                && mode.e.ncols() == n
                && mode.a.nrows() == n
                && mode.a.ncols() == n
                && mode.b.nrows() == n
                && mode.b.ncols() == m
                && mode.c.nrows() == p
                && mode.c.ncols() == n;
            if !ok {
                return Err(SystemError::DimensionMismatch(j));
            }
        }
        Ok(Self { modes, n, m, p })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn pencil(&self, j: usize) -> Pencil {
        Pencil::new(self.modes[j].e.clone(), self.modes[j].a.clone()).expect("validated")
    }
}

/// Exogenous switching signal: right-continuous, finitely many events, the
/// first event at t0.
#[derive(Debug, Clone)]
pub struct SwitchingSignal {
    pub t0: f64,
    /// (t_k, mode index 0-based), strictly increasing in t.
    pub events: Vec<(f64, usize)>,
    pub t_final: f64,
}

impl SwitchingSignal {
    pub fn new(t0: f64, events: Vec<(f64, usize)>, t_final: f64) -> Result<Self, SystemError> {
        if events.is_empty() || events[0].0 != t0 {
            return Err(SystemError::NonMonotoneSignal);
        }
        for w in events.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SystemError::NonMonotoneSignal);
            }
        }
        Ok(Self {
            t0,
            events,
            t_final,
        })
    }

    /// Single-mode signal over [t0, t_final].
    pub fn constant(mode: usize, t0: f64, t_final: f64) -> Self {
        Self {
            t0,
            events: vec![(t0, mode)],
            t_final,
        }
    }

    /// Periodic round-robin over all M modes with the given dwell time.
    pub fn round_robin(m_modes: usize, t0: f64, t_final: f64, dwell: f64) -> Self {
        let mut events = Vec::new();
        let mut t = t0;
        let mut j = 0;
        while t < t_final {
            events.push((t, j % m_modes));
            j += 1;
            t += dwell;
        }
        Self {
            t0,
            events,
            t_final,
        }
    }

    /// Active mode at time t (mode of the latest event with t_k ≤ t).
    pub fn mode_at(&self, t: f64) -> usize {
        let mut mode = self.events[0].1;
        for &(tk, m) in &self.events {
            if tk <= t {
                mode = m;
            } else {
                break;
            }
        }
        mode
    }

    pub fn validate_modes(&self, m_modes: usize) -> Result<(), SystemError> {
        for &(_, m) in &self.events {
            if m >= m_modes {
                return Err(SystemError::BadModeIndex(m, m_modes));
            }
        }
        Ok(())
    }
}

/// Per-mode findings of `validate_system`.
pub struct ModeReport {
    pub regular: bool,
    pub nu: usize,
    pub n_j: usize,
    /// None when the dense eigenvalue check was skipped (n_J > DENSE_LIMIT).
    pub stable: Option<bool>,
}

/// Validation summary: per-mode structure plus the cross-mode jump/impulse
/// assumption flags.
pub struct ValidationReport {
    pub modes: Vec<ModeReport>,
    /// assumption_i[(k, j)]: Π_k (E_j^imp)^i B_j^imp = 0 for all i — no
    /// input-induced state jumps when switching from mode j into mode k.
    pub assumption_i: DMatrix<bool>,
    /// assumption_ii[(k, j)]: C_k^imp (E_k^imp)^i Π_j = 0 for all i — no
    /// state-induced output impulses when switching from mode j into mode k.
    pub assumption_ii: DMatrix<bool>,
}

impl ValidationReport {
    pub fn assumption_i_all(&self) -> bool {
        self.assumption_i.iter().all(|&b| b)
    }

    pub fn assumption_ii_all(&self) -> bool {
        self.assumption_ii.iter().all(|&b| b)
    }
}

/// Validate regularity, index, stability, and the cross-mode jump/impulse
/// assumptions of a switched system.
pub fn validate_system(
    sys: &SwitchedSystem,
    tol_assume: f64,
) -> Result<ValidationReport, SystemError> {
    let m_modes = sys.num_modes();
    let mut mode_reports = Vec::with_capacity(m_modes);
    let mut decomps = Vec::with_capacity(m_modes);
    for j in 0..m_modes {
        let pencil = sys.pencil(j);
        let rank_tol = qwf::default_rank_tol(sys.n);
        let (md, ps) = match qwf::qwf_decompose(&pencil, &sys.modes[j].b, &sys.modes[j].c, rank_tol)
        {
            Ok(x) => x,
            Err(e @ QwfError::NotRegular(..)) => {
                let _ = e;
                mode_reports.push(ModeReport {
                    regular: false,
                    nu: 0,
                    n_j: 0,
                    stable: None,
                });
                decomps.push(None);
                continue;
            }
            Err(e) => return Err(SystemError::Mode(j, e)),
        };
        let stable = if md.core.n_j <= DENSE_LIMIT {
            let mut jdense = DMatrix::zeros(md.core.n_j, md.core.n_j);
            for i in 0..md.core.n_j {
                let mut e = DVector::zeros(md.core.n_j);
                e[i] = 1.0;
                jdense.set_column(i, &md.core.j_mul(&e));
            }
            Some(densela::is_hurwitz(&jdense, 0.0))
        } else {
            None
        };
        mode_reports.push(ModeReport {
            regular: true,
            nu: md.nu,
            n_j: md.core.n_j,
            stable,
        });
        decomps.push(Some((md, ps)));
    }

    let mut assumption_i = DMatrix::from_element(m_modes, m_modes, true);
    let mut assumption_ii = DMatrix::from_element(m_modes, m_modes, true);
    for k in 0..m_modes {
        for j in 0..m_modes {
            let (Some((md_k, ps_k)), Some((md_j, ps_j))) = (&decomps[k], &decomps[j]) else {
                continue;
            };
            // (i): Π_k (E_j^imp)^i B_j^imp, thin form Π_k (Ŵ_j N_j^i b_j^imp)
            let mut term = md_j.core.what() * &ps_j.b_imp_coords;
            let mut npow_b = ps_j.b_imp_coords.clone();
            let mut ok_i = true;
            for _ in 0..md_j.nu.max(1) {
                let scale = term.norm().max(1.0);
                let mut proj = DMatrix::zeros(sys.n, term.ncols());
                for c in 0..term.ncols() {
                    proj.set_column(c, &md_k.core.pi(&term.column(c).into_owned()));
                }
                if densela::spectral_norm(&proj) > tol_assume * scale {
                    ok_i = false;
                    break;
                }
                npow_b = &md_j.core.n_block * npow_b;
                term = md_j.core.what() * &npow_b;
            }
            assumption_i[(k, j)] = ok_i;

            // (ii): C_k^imp (E_k^imp)^i Π_j, thin rows
            let mut ok_ii = true;
            if md_k.core.n_n > 0 {
                let y2_rows = md_k.core.y2_rows();
                let x2e_rows = md_k.core.x2_e_rows();
                let mut rows = &ps_k.c_what * &y2_rows; // i = 0
                let mut cw_npow = ps_k.c_what.clone();
                for i in 0..md_k.nu.max(1) {
                    let scale = densela::spectral_norm(&rows).max(1.0);
                    // rows · Π_j  ==  (Π_jᵀ rowsᵀ)ᵀ
                    let mut proj = DMatrix::zeros(rows.nrows(), sys.n);
                    for r in 0..rows.nrows() {
                        let col = md_j.core.pi_t(&rows.row(r).transpose());
                        proj.row_mut(r).copy_from(&col.transpose());
                    }
                    if densela::spectral_norm(&proj) > tol_assume * scale {
                        ok_ii = false;
                        break;
                    }
                    if i + 1 >= md_k.nu.max(1) {
                        break;
                    }
                    rows = &cw_npow * &x2e_rows;
                    cw_npow = &cw_npow * &md_k.core.n_block;
                }
            }
            assumption_ii[(k, j)] = ok_ii;
        }
    }
    Ok(ValidationReport {
        modes: mode_reports,
        assumption_i,
        assumption_ii,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{sp_from_dense, sp_identity};

    fn single_ode_system() -> SwitchedSystem {
        let n = 3;
        let a = sp_from_dense(&(-DMatrix::<f64>::identity(n, n)));
        SwitchedSystem::new(vec![Mode {
            e: sp_identity(n),
            a,
            b: DMatrix::from_element(n, 1, 1.0),
            c: DMatrix::from_element(1, n, 1.0),
        }])
        .unwrap()
    }

    #[test]
    fn ode_system_validates_trivially() {
        let sys = single_ode_system();
        let rep = validate_system(&sys, TOL_ASSUME).unwrap();
        assert!(rep.modes[0].regular);
        assert_eq!(rep.modes[0].nu, 0);
        assert_eq!(rep.modes[0].n_j, 3);
        assert_eq!(rep.modes[0].stable, Some(true));
        assert!(rep.assumption_i_all());
        assert!(rep.assumption_ii_all());
    }

    #[test]
    fn signal_mode_lookup_is_right_continuous() {
        let sig = SwitchingSignal::new(0.0, vec![(0.0, 0), (1.0, 1), (2.5, 0)], 4.0).unwrap();
        assert_eq!(sig.mode_at(0.0), 0);
        assert_eq!(sig.mode_at(0.99), 0);
        assert_eq!(sig.mode_at(1.0), 1);
        assert_eq!(sig.mode_at(2.5), 0);
        assert_eq!(sig.mode_at(9.0), 0);
    }

    #[test]
    fn signal_rejects_decreasing_events() {
        assert!(SwitchingSignal::new(0.0, vec![(0.0, 0), (0.0, 1)], 1.0).is_err());
        assert!(SwitchingSignal::new(0.0, vec![(1.0, 0)], 2.0).is_err());
    }
}
