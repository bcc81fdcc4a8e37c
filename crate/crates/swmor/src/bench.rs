//! Deterministic benchmark generators.
//!
//! Two families: a holonomically constrained mass-spring-damper chain
//! (index 3, one-dimensional kernel of E) and a staggered-grid Stokes
//! discretization (index 2, kernel growing with the pressure dimension).
//! All randomness flows through SplitMix64 so a seed reproduces the exact
//! matrices byte-for-byte.

use crate::rng::SplitMix64;
use crate::sparse;
use crate::system::{Mode, SwitchedSystem};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("mass count g must be at least 3, got {0}")]
    TooSmallMsd(usize),
    #[error("grid must be at least 4, got {0}")]
    TooSmallGrid(usize),
    #[error("could not repair regularity of the jump-pair second mode after {0} attempts")]
    RegularityRepairFailed(usize),
}

/// Chain mass.
pub const MSD_MASS: f64 = 1.0;

/// Mass-spring-damper chain parameters: unit masses, ground springs k = 1
/// with neighbor springs k = 0.5, ground dampers d = 2 with neighbor
/// dampers d = 0.5. Each mass alone is critically damped (eigenvalues -1
/// and -2), so the chain spectrum stays clustered and uniformly damped:
/// the random per-mode damping shifts cannot destabilize it, and the
/// stationary Gramian iteration contracts without rescaling.
fn msd_blocks(g: usize) -> (Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
    let mut k_t = Vec::new();
    let mut d_t = Vec::new();
    for i in 0..g {
        let ends = (i > 0) as usize + (i + 1 < g) as usize;
        k_t.push((i, i, -(1.0 + 2.5 * ends as f64)));
        d_t.push((i, i, -(2.0 + 1.0 * ends as f64)));
        if i + 1 < g {
            k_t.push((i, i + 1, 2.5));
            k_t.push((i + 1, i, 2.5));
            d_t.push((i, i + 1, 1.0));
            d_t.push((i + 1, i, 1.0));
        }
    }
    (k_t, d_t)
}

/// Base constrained MSD matrices: n = 2g+1 with state (p, v, λ).
fn msd_base(g: usize) -> (Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
    let n = 2 * g + 1;
    let _ = n;
    let (k_t, d_t) = msd_blocks(g);
    // E = diag(I_g, M, 0)
    let mut e_t = Vec::new();
    for i in 0..g {
        e_t.push((i, i, 1.0));
    }
    for i in g..2 * g {
        e_t.push((i, i, MSD_MASS));
    }
    let _ = MSD_MASS;
    // A = [[0, I, 0], [K, D, -G^T], [G, 0, 0]], G = e_1^T - e_g^T
    let mut a_t = Vec::new();
    for i in 0..g {
        a_t.push((i, g + i, 1.0));
    }
    for &(i, j, v) in &k_t {
        a_t.push((g + i, j, v));
    }
    for &(i, j, v) in &d_t {
        a_t.push((g + i, g + j, v));
    }
    // -G^T in the velocity block, G in the constraint row
    a_t.push((g, 2 * g, -1.0));
    a_t.push((2 * g - 1, 2 * g, 1.0));
    a_t.push((2 * g, 0, 1.0));
    a_t.push((2 * g, g - 1, -1.0));
    (e_t, a_t)
}

fn msd_bc(g: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = 2 * g + 1;
    // B = [0; e_1; 0], C = [e_1, e_2, e_{g-1}]^T on the position block
    let mut b = DMatrix::zeros(n, 1);
    b[(g, 0)] = 1.0;
    let mut c = DMatrix::zeros(3, n);
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    c[(2, g - 2)] = 1.0;
    (b, c)
}

/// Constrained mass-spring-damper switched system: mode 1 is the base
/// system, modes j ≥ 2 carry a scalar uniform scaling of E, a uniform
/// damping shift, a moved constraint row, and an extra input column.
pub fn gen_msd(g: usize, m_modes: usize, seed: u64) -> Result<SwitchedSystem, BenchError> {
    if g < 3 {
        return Err(BenchError::TooSmallMsd(g));
    }
    let n = 2 * g + 1;
    let (e_t, a_t) = msd_base(g);
    let (b, c) = msd_bc(g);
    let mut rng = SplitMix64::new(seed);
    let mut modes = Vec::with_capacity(m_modes);
    for j in 0..m_modes {
        if j == 0 {
            modes.push(Mode {
                e: sparse::sp_from_triplets(n, n, &e_t).unwrap(),
                a: sparse::sp_from_triplets(n, n, &a_t).unwrap(),
                b: b.clone(),
                c: c.clone(),
            });
            continue;
        }
        let u_e = rng.uniform(0.0, 1.0);
        let u_d = rng.uniform(0.0, 0.35);
        let mut e_j = e_t.clone();
        for t in &mut e_j {
            t.2 *= 1.0 + u_e;
        }
        let mut a_j = a_t.clone();
        // damping shift on the velocity block
        for i in 0..g {
            a_j.push((g + i, g + i, u_d));
        }
        // constraint row moved: G + 0.5 e_{j+1}^T (1-based mode index j+1)
        let col = (j + 1).min(g - 1);
        a_j.push((2 * g, col, 0.5));
        // extra input column e_j on positions and velocities
        let mut b_j = b.clone();
        let row = j.min(g - 1);
        b_j[(row, 0)] += 1.0;
        b_j[(g + row, 0)] += 1.0;
        modes.push(Mode {
            e: sparse::sp_from_triplets(n, n, &e_j).unwrap(),
            a: sparse::sp_from_triplets(n, n, &a_j).unwrap(),
            b: b_j,
            c: c.clone(),
        });
    }
    Ok(SwitchedSystem::new(modes).expect("matching dimensions by construction"))
}

/// Two-mode MSD variant whose second mode zeroes the last mass entry of E,
/// producing input-dependent state jumps (the no-input-jump assumption
/// fails). The second mode decouples the constraint force from the massless
/// mass, augments the constraint row, and drives the massless mass directly
/// through the input; the combination keeps the pencil regular with index 3
/// while exciting the impulse chain in directions the other mode treats as
/// differential.
pub fn gen_msd_jump_pair(g: usize, seed: u64) -> Result<SwitchedSystem, BenchError> {
    if g < 3 {
        return Err(BenchError::TooSmallMsd(g));
    }
    let n = 2 * g + 1;
    let (e_t, a_t) = msd_base(g);
    let (b, c) = msd_bc(g);
    let mode1 = Mode {
        e: sparse::sp_from_triplets(n, n, &e_t).unwrap(),
        a: sparse::sp_from_triplets(n, n, &a_t).unwrap(),
        b: b.clone(),
        c: c.clone(),
    };
    // E2: drop the last mass (row 2g-1 of the diagonal)
    let e2_t: Vec<(usize, usize, f64)> = e_t
        .iter()
        .copied()
        .filter(|&(i, _, _)| i != 2 * g - 1)
        .collect();
    let max_tries = 8;
    for attempt in 0..max_tries {
        // decouple the constraint force from the massless mass (keeps the
        // multiplier out of the new algebraic row, preserving index 3) and
        // augment the constraint row with an interior coupling
        let mut a2_t: Vec<(usize, usize, f64)> = a_t
            .iter()
            .copied()
            .filter(|&(i, j, _)| !(i == 2 * g - 1 && j == 2 * g))
            .collect();
        let col = 1 + ((seed as usize + attempt) % (g - 2));
        a2_t.push((2 * g, col, 0.5));
        let mut b2 = b.clone();
        b2[(2 * g - 1, 0)] = 1.0;
        let mode2 = Mode {
            e: sparse::sp_from_triplets(n, n, &e2_t).unwrap(),
            a: sparse::sp_from_triplets(n, n, &a2_t).unwrap(),
            b: b2,
            c: c.clone(),
        };
        let sys = SwitchedSystem::new(vec![
            Mode {
                e: mode1.e.clone(),
                a: mode1.a.clone(),
                b: mode1.b.clone(),
                c: mode1.c.clone(),
            },
            mode2,
        ])
        .expect("matching dimensions");
        if let Ok(report) = crate::system::validate_system(&sys, crate::system::TOL_ASSUME) {
            let ok = report.modes.iter().all(|m| m.regular)
                && report.modes[1].nu == 3
                && report.modes.iter().all(|m| m.stable.unwrap_or(true))
                && !report.assumption_i_all();
            if ok {
                return Ok(sys);
            }
        }
    }
    Err(BenchError::RegularityRepairFailed(max_tries))
}

/// Index map for the staggered-grid Stokes unknowns.
struct StokesGrid {
    k: usize,
    nv_x: usize,
    nv_y: usize,
    n_rho: usize,
}

impl StokesGrid {
    fn new(k: usize) -> Self {
        Self {
            k,
            nv_x: (k - 1) * k,
            nv_y: k * (k - 1),
            n_rho: k * k - 1,
        }
    }
    fn nv(&self) -> usize {
        self.nv_x + self.nv_y
    }
    fn ux(&self, i: usize, j: usize) -> usize {
        // vertical interior edges: i = 0..k-2 (x), j = 0..k-1 (y)
        j * (self.k - 1) + i
    }
    fn uy(&self, i: usize, j: usize) -> usize {
        // horizontal interior edges: i = 0..k-1, j = 0..k-2
        self.nv_x + j * self.k + i
    }
    /// cell pressure index; the last cell is grounded (dropped)
    fn rho(&self, i: usize, j: usize) -> Option<usize> {
        let idx = j * self.k + i;
        if idx + 1 == self.k * self.k {
            None
        } else {
            Some(idx)
        }
    }
}

/// Instationary Stokes switched system on the unit square (MAC staggered
/// finite differences, Dirichlet velocity, one grounded pressure). Mode j
/// switches the diffusion coefficient over [0.65, 1.35] and perturbs E, B,
/// and C.
pub fn gen_stokes(grid: usize, m_modes: usize, seed: u64) -> Result<SwitchedSystem, BenchError> {
    if grid < 4 {
        return Err(BenchError::TooSmallGrid(grid));
    }
    let gd = StokesGrid::new(grid);
    let nv = gd.nv();
    let n = nv + gd.n_rho;
    let h = 1.0 / grid as f64;
    let ih2 = 1.0 / (h * h);
    let ih = 1.0 / h;

    // vector Laplacian on both staggered components (Dirichlet walls)
    let mut lap = Vec::new();
    for j in 0..gd.k {
        for i in 0..gd.k - 1 {
            let row = gd.ux(i, j);
            lap.push((row, row, -4.0 * ih2));
            if i > 0 {
                lap.push((row, gd.ux(i - 1, j), ih2));
            }
            if i + 1 < gd.k - 1 {
                lap.push((row, gd.ux(i + 1, j), ih2));
            }
            if j > 0 {
                lap.push((row, gd.ux(i, j - 1), ih2));
            }
            if j + 1 < gd.k {
                lap.push((row, gd.ux(i, j + 1), ih2));
            }
        }
    }
    for j in 0..gd.k - 1 {
        for i in 0..gd.k {
            let row = gd.uy(i, j);
            lap.push((row, row, -4.0 * ih2));
            if i > 0 {
                lap.push((row, gd.uy(i - 1, j), ih2));
            }
            if i + 1 < gd.k {
                lap.push((row, gd.uy(i + 1, j), ih2));
            }
            if j > 0 {
                lap.push((row, gd.uy(i, j - 1), ih2));
            }
            if j + 1 < gd.k - 1 {
                lap.push((row, gd.uy(i, j + 1), ih2));
            }
        }
    }

    // discrete gradient: u_x at (i,j) sees p(i+1,j) - p(i,j)
    let mut grad = Vec::new();
    for j in 0..gd.k {
        for i in 0..gd.k - 1 {
            let row = gd.ux(i, j);
            if let Some(c) = gd.rho(i + 1, j) {
                grad.push((row, c, -ih));
            }
            if let Some(c) = gd.rho(i, j) {
                grad.push((row, c, ih));
            }
        }
    }
    for j in 0..gd.k - 1 {
        for i in 0..gd.k {
            let row = gd.uy(i, j);
            if let Some(c) = gd.rho(i, j + 1) {
                grad.push((row, c, -ih));
            }
            if let Some(c) = gd.rho(i, j) {
                grad.push((row, c, ih));
            }
        }
    }

    // E = diag(I_nv, 0)
    let e_t: Vec<(usize, usize, f64)> = (0..nv).map(|i| (i, i, 1.0)).collect();

    let mut base_b = DMatrix::zeros(n, 3);
    base_b[(0, 0)] = 1.0;
    base_b[(1, 1)] = 1.0;
    base_b[(2, 2)] = 1.0;
    let mut base_c = DMatrix::zeros(3, n);
    base_c[(0, 0)] = 1.0;
    base_c[(1, 1)] = 1.0;
    base_c[(2, 2)] = 1.0;

    let mut rng = SplitMix64::new(seed);
    let mut modes = Vec::with_capacity(m_modes);
    for j in 0..m_modes {
        let nu_j = if m_modes == 1 {
            1.0
        } else {
            0.65 + 0.7 * (j as f64) / (m_modes as f64 - 1.0)
        };
        let mut a_t: Vec<(usize, usize, f64)> =
            lap.iter().map(|&(r, c, v)| (r, c, nu_j * v)).collect();
        for &(r, c, v) in &grad {
            a_t.push((r, c + nv, v));
            a_t.push((c + nv, r, v));
        }
        let mut e_j = e_t.clone();
        let mut b_j = base_b.clone();
        let mut c_j = base_c.clone();
        if j > 0 {
            let u_e = rng.uniform(0.0, 1.0);
            for t in &mut e_j {
                t.2 *= 1.0 + u_e;
            }
            // unit-vector perturbations on B and C (1-based column shifts)
            b_j[(j.min(nv - 2), 0)] += 1.0;
            b_j[((j + 1).min(nv - 1), 1)] += 1.0;
            b_j[(nv + j.min(gd.n_rho - 1), 2)] += 1.0;
            c_j[(0, j.min(nv - 2))] += 1.0;
            c_j[(1, (j + 1).min(nv - 1))] += 1.0;
            c_j[(2, nv + j.min(gd.n_rho - 1))] += 1.0;
        }
        modes.push(Mode {
            e: sparse::sp_from_triplets(n, n, &e_j).unwrap(),
            a: sparse::sp_from_triplets(n, n, &a_t).unwrap(),
            b: b_j,
            c: c_j,
        });
    }
    Ok(SwitchedSystem::new(modes).expect("matching dimensions by construction"))
}

/// State dimension of the Stokes benchmark for a given grid parameter.
pub fn stokes_dim(grid: usize) -> usize {
    let gd = StokesGrid::new(grid);
    gd.nv() + gd.n_rho
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qwf;
    use crate::sparse::{sp_to_dense, StructuralKernel};
    use crate::system::{validate_system, TOL_ASSUME};

    #[test]
    fn msd_dimensions_and_determinism() {
        let sys = gen_msd(5, 3, 1).unwrap();
        assert_eq!(sys.n, 11);
        assert_eq!(sys.m, 1);
        assert_eq!(sys.p, 3);
        let sys2 = gen_msd(5, 3, 1).unwrap();
        for j in 0..3 {
            assert_eq!(
                sp_to_dense(&sys.modes[j].a),
                sp_to_dense(&sys2.modes[j].a)
            );
            assert_eq!(sys.modes[j].b, sys2.modes[j].b);
        }
        let sys3 = gen_msd(5, 3, 2).unwrap();
        assert_ne!(
            sp_to_dense(&sys.modes[1].a),
            sp_to_dense(&sys3.modes[1].a)
        );
    }

    #[test]
    fn msd_kernel_dimension_one() {
        let sys = gen_msd(6, 2, 7).unwrap();
        for mode in &sys.modes {
            let sk = StructuralKernel::detect(&mode.e).unwrap();
            assert_eq!(sk.kernel_dim(), 1);
        }
    }

    #[test]
    fn msd_modes_validate() {
        let sys = gen_msd(8, 4, 3).unwrap();
        let rep = validate_system(&sys, TOL_ASSUME).unwrap();
        for (j, m) in rep.modes.iter().enumerate() {
            assert!(m.regular, "mode {j} regular");
            assert_eq!(m.nu, 3, "mode {j} index");
            assert_eq!(m.stable, Some(true), "mode {j} stable");
        }
        assert!(rep.assumption_i_all(), "no input-induced jumps");
    }

    #[test]
    fn msd_jump_pair_violates_assumption() {
        let sys = gen_msd_jump_pair(10, 1).unwrap();
        let rep = validate_system(&sys, TOL_ASSUME).unwrap();
        assert!(rep.modes.iter().all(|m| m.regular));
        assert!(!rep.assumption_i_all(), "input jump assumption must fail");
    }

    #[test]
    fn stokes_dimensions_and_index() {
        // grid 40 reproduces the reference dimension 4719
        assert_eq!(stokes_dim(40), 4719);
        let sys = gen_stokes(6, 2, 5).unwrap();
        assert_eq!(sys.n, stokes_dim(6));
        // base mode has nilpotency index two
        let p = sys.pencil(0);
        let (md, _) = qwf::qwf_decompose(
            &p,
            &sys.modes[0].b,
            &sys.modes[0].c,
            qwf::default_rank_tol(sys.n),
        )
        .unwrap();
        assert_eq!(md.nu, 2);
        // kernel dimension is the pressure count
        let sk = StructuralKernel::detect(&sys.modes[0].e).unwrap();
        assert_eq!(sk.kernel_dim(), 6 * 6 - 1);
    }

    #[test]
    fn stokes_nu_values_uniform() {
        // with M = 5 the diffusion values are evenly spaced over the interval
        let expect = [0.65, 0.825, 1.0, 1.175, 1.35];
        for (j, e) in expect.iter().enumerate() {
            let nu_j = 0.65 + 0.7 * (j as f64) / 4.0;
            assert!((nu_j - e).abs() < 1e-12);
        }
    }

    #[test]
    fn stokes_modes_validate() {
        let sys = gen_stokes(5, 3, 11).unwrap();
        let rep = validate_system(&sys, TOL_ASSUME).unwrap();
        for (j, m) in rep.modes.iter().enumerate() {
            assert!(m.regular, "mode {j}");
            assert_eq!(m.nu, 2, "mode {j}");
            assert_eq!(m.stable, Some(true), "mode {j}");
        }
        assert!(rep.assumption_i_all());
    }
}
