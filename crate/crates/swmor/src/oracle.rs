//! Brute-force reference computations used by the test suites: the
//! Kronecker-assembled GLE solve, dense Lyapunov reference, and the
//! recursive reachable/observable subspaces of the switched jump-flow form.
//! Everything here is dense and capped at desk scale on purpose — these
//! routes must stay independent of the iterative solvers they check.

use crate::densela::{self, expm, orth};
use crate::jumpflow::JumpFlowForm;
use crate::lyapunov::{solve_lyapunov_dense, LyapunovError};
use crate::system::SwitchingSignal;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("Kronecker operator is singular: GLE not uniquely solvable")]
    SingularOperator,
    #[error("problem dimension {0} exceeds oracle cap {1}")]
    TooLarge(usize, usize),
    #[error("matrix A is not asymptotically stable")]
    UnstableA,
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

pub const KRON_CAP: usize = 60;

/// Solve the GLE 𝒜X + X𝒜ᵀ + Σ ℱ_j X ℱ_jᵀ + W = 0 by assembling the n²×n²
/// vectorized operator and solving directly. W = Σ ℬ_j ℬ_jᵀ.
pub fn gle_kron_oracle(
    acal: &DMatrix<f64>,
    fcal: &[DMatrix<f64>],
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>, OracleError> {
    let n = acal.nrows();
    if n > KRON_CAP {
        return Err(OracleError::TooLarge(n, KRON_CAP));
    }
    let id = DMatrix::identity(n, n);
    let mut op = densela::kron(&id, acal) + densela::kron(acal, &id);
    for f in fcal {
        op += densela::kron(f, f);
    }
    // unique solvability: pivots must clear the operator scale
    let op_scale = 2.0 * acal.norm() + fcal.iter().map(|f| f.norm() * f.norm()).sum::<f64>();
    let lu = op.clone().lu();
    let u = lu.u();
    let piv_min = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if piv_min <= (n * n) as f64 * f64::EPSILON * op_scale.max(1e-300) {
        return Err(OracleError::SingularOperator);
    }
    let rhs = -densela::vec_mat(w);
    let x_vec = lu.solve(&rhs).ok_or(OracleError::SingularOperator)?;
    let x = densela::unvec(&x_vec, n, n);
    Ok((&x + x.transpose()) * 0.5)
}

/// Dense Lyapunov reference solve with a stability guard.
pub fn dense_lyapunov_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, OracleError> {
    if !densela::is_hurwitz(a, 0.0) {
        return Err(OracleError::UnstableA);
    }
    Ok(solve_lyapunov_dense(a, &(b * b.transpose()))?)
}

/// Subspace sum: orth([A, B]).
fn subspace_sum(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    orth(&densela::hcat(a, b), tol)
}

/// Subspace intersection via complements.
fn subspace_intersect(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let ac = densela::orth_complement(a, tol);
    let bc = densela::orth_complement(b, tol);
    densela::orth_complement(&densela::hcat(&ac, &bc), tol)
}

/// Krylov-style smallest invariant subspace containing im(B): ⟨A | im B⟩.
fn invariant_containing(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut gen = b.clone();
    let mut power = b.clone();
    for _ in 1..n {
        power = a * &power;
        gen = densela::hcat(&gen, &densela::normalize_columns(&power));
    }
    orth(&gen, tol)
}

/// Largest A-invariant subspace contained in ker(C): ⟨ker C | A⟩.
fn invariant_inside_kernel(a: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    // intersect ker(C A^i) over i = 0..n-1
    let n = a.nrows();
    let mut stacked = c.clone();
    let mut ca = c.clone();
    for _ in 1..n {
        ca = &ca * a;
        stacked = {
            let mut s = DMatrix::zeros(stacked.nrows() + ca.nrows(), n);
            s.rows_mut(0, stacked.nrows()).copy_from(&stacked);
            s.rows_mut(stacked.nrows(), ca.nrows())
                .copy_from(&densela::normalize_columns(&ca.transpose()).transpose());
            s
        };
    }
    densela::null_space(&stacked, tol)
}

/// Densified per-mode data for the subspace recursions.
pub struct DenseModeData {
    pub a_diff: DMatrix<f64>,
    pub b_diff: DMatrix<f64>,
    pub c_diff: DMatrix<f64>,
    pub pi: DMatrix<f64>,
}

pub fn densify_modes(jf: &JumpFlowForm) -> Vec<DenseModeData> {
    jf.modes
        .iter()
        .map(|md| {
            let dq = md.decomp.core.densify();
            let b_diff = &dq.vhat * &md.proj.b_diff_coords;
            let c_diff = &md.proj.c_diff_coords * dq.vhat.transpose();
            DenseModeData {
                a_diff: dq.a_diff,
                b_diff,
                c_diff,
                pi: dq.pi,
            }
        })
        .collect()
}

/// Reachable and observable subspaces of the jump-flow system along a
/// switching signal (Lemma-style recursion with matrix exponentials).
/// With `use_projectors = false` the consistency projectors are replaced by
/// the identity, the variant whose equivalence the reduction relies on.
pub fn reachable_observable_sets(
    modes: &[DenseModeData],
    signal: &SwitchingSignal,
    use_projectors: bool,
    tol: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = modes[0].a_diff.nrows();
    let id = DMatrix::identity(n, n);
    let events = &signal.events;
    let kappa = events.len();
    let seg_len = |k: usize| -> f64 {
        let end = if k + 1 < kappa {
            events[k + 1].0
        } else {
            signal.t_final
        };
        end - events[k].0
    };

    // forward reachability recursion
    let mut m_set = {
        let q0 = events[0].1;
        invariant_containing(&modes[q0].a_diff, &modes[q0].b_diff, tol)
    };
    for k in 1..kappa {
        let q = events[k].1;
        let r_q = invariant_containing(&modes[q].a_diff, &modes[q].b_diff, tol);
        let pi = if use_projectors { &modes[q].pi } else { &id };
        let flow = expm(&(&modes[q].a_diff * seg_len(k)));
        let carried = orth(&(flow * pi * &m_set), tol);
        m_set = subspace_sum(&r_q, &carried, tol);
    }

    // backward unobservability recursion
    let mut n_set = {
        let qk = events[kappa - 1].1;
        invariant_inside_kernel(&modes[qk].a_diff, &modes[qk].c_diff, tol)
    };
    for k in (0..kappa - 1).rev() {
        let q = events[k].1;
        let q_next = events[k + 1].1;
        let uo_q = invariant_inside_kernel(&modes[q].a_diff, &modes[q].c_diff, tol);
        let pi_next = if use_projectors {
            &modes[q_next].pi
        } else {
            &id
        };
        // preimage  Π⁻¹ N  then  e^{-A τ} (·)
        let qn = orth(&n_set, tol);
        let resid = pi_next - &qn * (qn.transpose() * pi_next);
        let pre = densela::null_space(&resid, tol);
        let flow_back = expm(&(-&modes[q].a_diff * seg_len(k)));
        let carried = orth(&(flow_back * pre), tol);
        n_set = subspace_intersect(&uo_q, &carried, tol);
    }
    let o_set = densela::orth_complement(&n_set, tol);
    (m_set, o_set)
}

/// Reference jump-flow simulation in full dense coordinates: integrates
/// ż = A^diff_q z + B^diff_q u on ℝⁿ per segment, applies the consistency
/// projector (plus the algebraic carry) at switches, and reconstructs the
/// output with the mode's algebraic chain. Independent of the reduced
/// per-mode-coordinate path used by the production simulator.
pub fn simulate_decoupled_dense(
    jf: &crate::jumpflow::JumpFlowForm,
    signal: &crate::system::SwitchingSignal,
    input: &crate::inputs::InputSignal,
    opts: &crate::sim::SimOptions,
) -> Result<crate::sim::TrajectoryRecord, crate::sim::SimError> {
    let dense: Vec<DenseModeData> = densify_modes(jf);
    let chains: Vec<Vec<DMatrix<f64>>> = jf.modes.iter().map(|m| m.impulse_chain()).collect();
    crate::sim::simulate_dense_reference(jf, &dense, &chains, signal, input, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumpflow::reformulate_jumpflow;
    use crate::rng::SplitMix64;
    use crate::sparse::{sp_from_dense, sp_identity};
    use crate::system::{Mode, SwitchedSystem};

    #[test]
    fn kron_scalar_cases() {
        // M = 1 scalar A = -1, B = sqrt(2): X = 1
        let a = DMatrix::from_element(1, 1, -1.0);
        let w = DMatrix::from_element(1, 1, 2.0);
        let x = gle_kron_oracle(&a, &[], &w).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);

        // A = -2, F = 1, B = 1: -4x + x + 1 = 0 -> x = 1/3
        let a = DMatrix::from_element(1, 1, -2.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let x = gle_kron_oracle(&a, &[f], &w).unwrap();
        assert!((x[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn kron_rejects_singular_operator() {
        // A = -1, F = sqrt(2): operator -2 + 2 = 0 in the scalar case
        let a = DMatrix::from_element(1, 1, -1.0);
        let f = DMatrix::from_element(1, 1, 2f64.sqrt());
        let w = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            gle_kron_oracle(&a, &[f], &w),
            Err(OracleError::SingularOperator)
        ));
    }

    #[test]
    fn dense_oracle_guards_stability() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            dense_lyapunov_oracle(&a, &b),
            Err(OracleError::UnstableA)
        ));
        let a = DMatrix::from_partial_diagonal(2, 2, &[-1.0, -2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let x = dense_lyapunov_oracle(&a, &b).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(x[(1, 1)].abs() < 1e-14);
    }

    #[test]
    fn reachable_set_of_controllable_mode_is_full() {
        let n = 4;
        let mut rng = SplitMix64::new(3);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (n as f64 * 2.0);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.normal());
        let c = DMatrix::from_fn(1, n, |_, _| rng.normal());
        let sys = SwitchedSystem::new(vec![Mode {
            e: sp_identity(n),
            a: sp_from_dense(&a),
            b,
            c,
        }])
        .unwrap();
        let jf = reformulate_jumpflow(&sys).unwrap();
        let modes = densify_modes(&jf);
        let sig = SwitchingSignal::constant(0, 0.0, 1.0);
        let (r, o) = reachable_observable_sets(&modes, &sig, true, 1e-10);
        assert_eq!(r.ncols(), n);
        assert_eq!(o.ncols(), n);
    }

    #[test]
    fn zero_input_map_gives_trivial_reachability() {
        let n = 3;
        let a = -DMatrix::<f64>::identity(n, n);
        let sys = SwitchedSystem::new(vec![Mode {
            e: sp_identity(n),
            a: sp_from_dense(&a),
            b: DMatrix::zeros(n, 1),
            c: DMatrix::from_element(1, n, 1.0),
        }])
        .unwrap();
        let jf = reformulate_jumpflow(&sys).unwrap();
        let modes = densify_modes(&jf);
        let sig = SwitchingSignal::constant(0, 0.0, 1.0);
        let (r, _) = reachable_observable_sets(&modes, &sig, true, 1e-10);
        assert_eq!(r.ncols(), 0);
    }
}
