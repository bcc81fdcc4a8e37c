//! Time-domain simulation of the jump-flow form.
//!
//! Each inter-switch segment integrates the active mode's slow dynamics in
//! its own differential coordinates with an adaptive Dormand-Prince 5(4)
//! pair; switching instants are hard restart events where the rectangular
//! transition map (plus the input-derivative jump term when the mode being
//! left carries impulse content) is applied. Dirac output terms are never
//! discretized: they are logged as (time, derivative order, coefficient)
//! records, and L2 norms only ever see the smooth part.

use crate::inputs::{InputError, InputSignal};
use crate::jumpflow::JumpFlowForm;
use crate::system::SwitchingSignal;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("integrator failed: step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("integrator failed: exceeded {0} steps")]
    TooManySteps(usize),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("trajectory grids do not match (segment {0})")]
    GridMismatch(usize),
    #[error("switching signal references mode {0} but the system has {1} modes")]
    BadMode(usize, usize),
}

/// Integration options.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// output sampling step for the comparison grid
    pub dt: f64,
    pub max_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            dt: 0.01,
            max_steps: 2_000_000,
        }
    }
}

/// One accepted Dormand-Prince step with its dense-output coefficients.
struct DenseStep {
    t: f64,
    h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseStep {
    fn eval(&self, t: f64) -> DVector<f64> {
        let theta = ((t - self.t) / self.h).clamp(0.0, 1.0);
        let theta1 = 1.0 - theta;
        &self.cont[0]
            + theta
                * (&self.cont[1]
                    + theta1 * (&self.cont[2] + theta * (&self.cont[3] + theta1 * &self.cont[4])))
    }
}

/// Dense trajectory over one smooth segment.
struct SegmentSolution {
    steps: Vec<DenseStep>,
    t_end: f64,
    y_end: DVector<f64>,
}

impl SegmentSolution {
    fn eval(&self, t: f64) -> DVector<f64> {
        if self.steps.is_empty() || t >= self.t_end {
            return self.y_end.clone();
        }
        let mut lo = 0;
        let mut hi = self.steps.len() - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.steps[mid].t <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        self.steps[lo].eval(t)
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// b - b̂ error coefficients
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Integrate y' = f(t, y) over [t0, t1] with dense output.
fn integrate<F>(
    f: &F,
    t0: f64,
    t1: f64,
    y0: DVector<f64>,
    opts: &SimOptions,
) -> Result<SegmentSolution, SimError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(SegmentSolution {
            steps: Vec::new(),
            t_end: t1,
            y_end: y0,
        });
    }
    let n = y0.len();
    if n == 0 {
        return Ok(SegmentSolution {
            steps: Vec::new(),
            t_end: t1,
            y_end: y0,
        });
    }
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut h = (span / 100.0).min(0.1).max(1e-8 * span);
    let h_min = 1e-14 * span.max(1.0);
    let mut steps = Vec::new();
    let mut nsteps = 0usize;
    while t < t1 {
        if nsteps > opts.max_steps {
            return Err(SimError::TooManySteps(opts.max_steps));
        }
        nsteps += 1;
        h = h.min(t1 - t);
        if h < h_min {
            return Err(SimError::StepUnderflow(t));
        }
        let k2 = f(t + C[1] * h, &(&y + h * A2[0] * &k1));
        let k3 = f(t + C[2] * h, &(&y + h * (A3[0] * &k1 + A3[1] * &k2)));
        let k4 = f(
            t + C[3] * h,
            &(&y + h * (A4[0] * &k1 + A4[1] * &k2 + A4[2] * &k3)),
        );
        let k5 = f(
            t + C[4] * h,
            &(&y + h * (A5[0] * &k1 + A5[1] * &k2 + A5[2] * &k3 + A5[3] * &k4)),
        );
        let k6 = f(
            t + h,
            &(&y + h * (A6[0] * &k1 + A6[1] * &k2 + A6[2] * &k3 + A6[3] * &k4 + A6[4] * &k5)),
        );
        let y_new = &y + h * (B[0] * &k1 + B[2] * &k3 + B[3] * &k4 + B[4] * &k5 + B[5] * &k6);
        let k7 = f(t + h, &y_new);
        let err_vec =
            h * (E[0] * &k1 + E[2] * &k3 + E[3] * &k4 + E[4] * &k5 + E[5] * &k6 + E[6] * &k7);
        let mut err_norm = 0.0;
        for i in 0..n {
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            let e = err_vec[i] / sc;
            err_norm += e * e;
        }
        let err_norm = (err_norm / n as f64).sqrt();
        if err_norm <= 1.0 {
            // accept; store dense-output coefficients
            let ydiff = &y_new - &y;
            let bspl = h * &k1 - &ydiff;
            let cont4 = &ydiff - h * &k7 - &bspl;
            let cont5 = h * (D[0] * &k1
                + D[2] * &k3
                + D[3] * &k4
                + D[4] * &k5
                + D[5] * &k6
                + D[6] * &k7);
            steps.push(DenseStep {
                t,
                h,
                cont: [y.clone(), ydiff, bspl, cont4, cont5],
            });
            t += h;
            y = y_new;
            k1 = k7; // FSAL
        }
        let factor = if err_norm == 0.0 {
            5.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Ok(SegmentSolution {
        steps,
        t_end: t1,
        y_end: y,
    })
}

/// State jump record at a switching instant (full-space embeddings).
pub struct JumpRecord {
    pub t: f64,
    pub from_mode: usize,
    pub to_mode: usize,
    pub pre: DVector<f64>,
    pub post: DVector<f64>,
}

/// Symbolic Dirac output coefficient: y[t] ⊇ coeff · δ_t^{(order)}.
pub struct ImpulseRecord {
    pub t: f64,
    pub order: usize,
    pub coeff: DVector<f64>,
}

/// Output samples over one smooth segment.
pub struct SegmentTrace {
    pub mode: usize,
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
}

/// Full simulation output: per-segment smooth samples, jump and impulse
/// logs, and L2 norms of the smooth output and the input.
pub struct TrajectoryRecord {
    pub segments: Vec<SegmentTrace>,
    pub jumps: Vec<JumpRecord>,
    pub impulses: Vec<ImpulseRecord>,
    pub l2_output: f64,
    pub l2_input: f64,
}

impl TrajectoryRecord {
    /// L2 norm of the output difference on the shared sampling grid
    /// (per-segment composite Simpson).
    pub fn l2_diff(&self, other: &TrajectoryRecord) -> Result<f64, SimError> {
        if self.segments.len() != other.segments.len() {
            return Err(SimError::GridMismatch(0));
        }
        let mut acc = 0.0;
        for (s, (a, b)) in self.segments.iter().zip(other.segments.iter()).enumerate() {
            if a.t.len() != b.t.len() {
                return Err(SimError::GridMismatch(s));
            }
            for (ta, tb) in a.t.iter().zip(b.t.iter()) {
                if (ta - tb).abs() > 1e-12 * (1.0 + ta.abs()) {
                    return Err(SimError::GridMismatch(s));
                }
            }
            let vals: Vec<f64> = a
                .y
                .iter()
                .zip(b.y.iter())
                .map(|(ya, yb)| (ya - yb).norm_squared())
                .collect();
            acc += simpson(&a.t, &vals);
        }
        Ok(acc.max(0.0).sqrt())
    }

    /// Flattened (t, y) samples across segments.
    pub fn flat_samples(&self) -> Vec<(f64, &DVector<f64>)> {
        let mut out = Vec::new();
        for seg in &self.segments {
            for (t, y) in seg.t.iter().zip(seg.y.iter()) {
                out.push((*t, y));
            }
        }
        out
    }
}

/// Composite Simpson on a uniform grid with an even number of intervals.
fn simpson(t: &[f64], vals: &[f64]) -> f64 {
    let n = t.len();
    if n < 3 {
        return 0.0;
    }
    let h = (t[n - 1] - t[0]) / (n - 1) as f64;
    let mut acc = vals[0] + vals[n - 1];
    for (i, v) in vals.iter().enumerate().take(n - 1).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// Per-mode dense data used by the integrator.
struct DenseModeSim {
    j: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    feedthrough: Vec<DMatrix<f64>>,
}

/// Simulate the jump-flow form along a switching signal. The optional
/// `feedthrough_override` keeps a reduced model's output consistent with the
/// full model's input-derivative feedthrough (it is exact and is never
/// approximated by the projection).
pub fn simulate_jumpflow(
    jf: &JumpFlowForm,
    signal: &SwitchingSignal,
    input: &InputSignal,
    opts: &SimOptions,
    feedthrough_override: Option<&[Vec<DMatrix<f64>>]>,
) -> Result<TrajectoryRecord, SimError> {
    let m_modes = jf.modes.len();
    for &(_, q) in &signal.events {
        if q >= m_modes {
            return Err(SimError::BadMode(q, m_modes));
        }
    }
    // densify the per-mode slow dynamics once
    let dense: Vec<DenseModeSim> = (0..m_modes)
        .map(|q| {
            let md = &jf.modes[q];
            let ft = match feedthrough_override {
                Some(o) => o[q].clone(),
                None => md.proj.feedthrough.clone(),
            };
            DenseModeSim {
                j: md.j_dense(),
                b: md.proj.b_diff_coords.clone(),
                c: md.proj.c_diff_coords.clone(),
                feedthrough: ft,
            }
        })
        .collect();

    let mut events: Vec<(f64, usize)> = signal
        .events
        .iter()
        .copied()
        .filter(|&(t, _)| t < signal.t_final)
        .collect();
    if events.is_empty() {
        events.push((signal.t0, signal.events[0].1));
    }

    let mut segments = Vec::new();
    let mut jumps = Vec::new();
    let mut impulses = Vec::new();
    let mut l2_output = 0.0;
    let mut l2_input = 0.0;

    let mut q_prev: Option<usize> = None;
    let mut z = DVector::<f64>::zeros(jf.modes[events[0].1].n_j());
    for (k, &(t_k, q)) in events.iter().enumerate() {
        let t_next = if k + 1 < events.len() {
            events[k + 1].0
        } else {
            signal.t_final
        };

        // switch handling: transition map plus input-derivative jump term
        if let Some(qp) = q_prev {
            let pre_full = jf.modes[qp].decomp.core.vhat_mul(&z);
            let mut x_pre = pre_full.clone();
            // algebraic content of the mode being left
            let chain = jf.modes[qp].impulse_chain();
            for (i, link) in chain.iter().enumerate() {
                let u_i = input.eval_vec(t_k, i)?;
                x_pre -= link * u_i;
            }
            let z_new = jf.modes[q].decomp.core.y1(&x_pre);
            let post_full = jf.modes[q].decomp.core.vhat_mul(&z_new);
            record_impulses(jf, q, t_k, &x_pre, input, &mut impulses)?;
            jumps.push(JumpRecord {
                t: t_k,
                from_mode: qp,
                to_mode: q,
                pre: pre_full,
                post: post_full,
            });
            z = z_new;
        } else if z.len() != jf.modes[q].n_j() {
            z = DVector::zeros(jf.modes[q].n_j());
        }
        q_prev = Some(q);

        // integrate the smooth segment
        let dm = &dense[q];
        let rhs = |t: f64, y: &DVector<f64>| -> DVector<f64> {
            let u = input
                .eval_vec(t, 0)
                .expect("order-0 input always available");
            &dm.j * y + &dm.b * u
        };
        let sol = integrate(&rhs, t_k, t_next, z.clone(), opts)?;

        // L2 of output and input on the dense output, 8 points per step
        for step in &sol.steps {
            let mut ts = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            let mut us = Vec::with_capacity(9);
            for i in 0..=8 {
                let t = step.t + step.h * (i as f64) / 8.0;
                let zt = step.eval(t);
                let y = output_at(dm, &zt, t, input)?;
                ts.push(t);
                ys.push(y.norm_squared());
                us.push(input.eval_vec(t, 0)?.norm_squared());
            }
            l2_output += simpson(&ts, &ys);
            l2_input += simpson(&ts, &us);
        }

        // uniform comparison grid (even number of subintervals)
        let span = t_next - t_k;
        let mut n_sub = (span / opts.dt).ceil() as usize;
        n_sub = n_sub.max(2);
        if n_sub % 2 == 1 {
            n_sub += 1;
        }
        let mut ts = Vec::with_capacity(n_sub + 1);
        let mut ys = Vec::with_capacity(n_sub + 1);
        for i in 0..=n_sub {
            let t = t_k + span * (i as f64) / (n_sub as f64);
            let zt = sol.eval(t);
            ys.push(output_at(dm, &zt, t, input)?);
            ts.push(t);
        }
        segments.push(SegmentTrace {
            mode: q,
            t: ts,
            y: ys,
        });
        z = sol.y_end;
    }

    Ok(TrajectoryRecord {
        segments,
        jumps,
        impulses,
        l2_output: l2_output.max(0.0).sqrt(),
        l2_input: l2_input.max(0.0).sqrt(),
    })
}

fn output_at(
    dm: &DenseModeSim,
    z: &DVector<f64>,
    t: f64,
    input: &InputSignal,
) -> Result<DVector<f64>, SimError> {
    let mut y = &dm.c * z;
    for (i, d) in dm.feedthrough.iter().enumerate() {
        y += d * input.eval_vec(t, i)?;
    }
    Ok(y)
}

/// Dirac coefficients emitted when the state entering mode q is
/// inconsistent: the mismatch between the carried algebraic content and the
/// new mode's consistent algebraic solution drives δ-terms of order
/// 0..ν−2.
fn record_impulses(
    jf: &JumpFlowForm,
    q: usize,
    t_k: f64,
    x_pre: &DVector<f64>,
    input: &InputSignal,
    impulses: &mut Vec<ImpulseRecord>,
) -> Result<(), SimError> {
    let md = &jf.modes[q];
    let core = &md.decomp.core;
    if core.n_n == 0 || md.nu() < 2 {
        return Ok(());
    }
    // algebraic coordinates of the incoming state
    let w_in = core.y2(x_pre);
    // consistent algebraic solution just after the switch
    let mut w_cons = DVector::zeros(core.n_n);
    let mut npow_b = md.proj.b_imp_coords.clone();
    for i in 0..md.nu() {
        let u_i = input.eval_vec(t_k, i)?;
        w_cons -= &npow_b * u_i;
        npow_b = &core.n_block * npow_b;
    }
    let mismatch = w_in - w_cons;
    let c_what = &md.proj.c_what;
    let mut npow = core.n_block.clone(); // N^{i+1} starting at i = 0
    for order in 0..md.nu().saturating_sub(1) {
        let coeff = -(c_what * (&npow * &mismatch));
        if coeff.norm() > 1e-14 * (1.0 + mismatch.norm()) {
            impulses.push(ImpulseRecord {
                t: t_k,
                order,
                coeff,
            });
        }
        npow = &core.n_block * npow;
    }
    Ok(())
}

/// Simulate a reduced bundle: switched linear flow with the bundle's
/// explicit jump maps, input-derivative jump blocks, and carried-over
/// feedthrough.
pub fn simulate_rom(
    rom: &crate::balance::RomBundle,
    signal: &SwitchingSignal,
    input: &InputSignal,
    opts: &SimOptions,
) -> Result<TrajectoryRecord, SimError> {
    let m_modes = rom.num_modes();
    for &(_, q) in &signal.events {
        if q >= m_modes {
            return Err(SimError::BadMode(q, m_modes));
        }
    }
    let mut events: Vec<(f64, usize)> = signal
        .events
        .iter()
        .copied()
        .filter(|&(t, _)| t < signal.t_final)
        .collect();
    if events.is_empty() {
        events.push((signal.t0, signal.events[0].1));
    }
    let mut segments = Vec::new();
    let mut jumps = Vec::new();
    let mut l2_output = 0.0;
    let mut l2_input = 0.0;
    let mut xi = DVector::<f64>::zeros(rom.r);
    let mut q_prev: Option<usize> = None;
    for (k, &(t_k, q)) in events.iter().enumerate() {
        let t_next = if k + 1 < events.len() {
            events[k + 1].0
        } else {
            signal.t_final
        };
        if let Some(qp) = q_prev {
            let pre = xi.clone();
            let mut xi_new = &rom.jump[q][qp] * &xi;
            for (i, block) in rom.jump_input[q][qp].iter().enumerate() {
                xi_new += block * input.eval_vec(t_k, i)?;
            }
            jumps.push(JumpRecord {
                t: t_k,
                from_mode: qp,
                to_mode: q,
                pre,
                post: xi_new.clone(),
            });
            xi = xi_new;
        }
        q_prev = Some(q);
        let a = &rom.a_red[q];
        let b = &rom.b_red[q];
        let c = &rom.c_red[q];
        let ft = &rom.feedthrough[q];
        let rhs = |t: f64, y: &DVector<f64>| -> DVector<f64> {
            let u = input.eval_vec(t, 0).expect("order-0 input");
            a * y + b * u
        };
        let sol = integrate(&rhs, t_k, t_next, xi.clone(), opts)?;
        for step in &sol.steps {
            let mut ts = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            let mut us = Vec::with_capacity(9);
            for i in 0..=8 {
                let t = step.t + step.h * (i as f64) / 8.0;
                let zt = step.eval(t);
                let y = rom_output(c, ft, &zt, t, input)?;
                ts.push(t);
                ys.push(y.norm_squared());
                us.push(input.eval_vec(t, 0)?.norm_squared());
            }
            l2_output += simpson(&ts, &ys);
            l2_input += simpson(&ts, &us);
        }
        let span = t_next - t_k;
        let mut n_sub = (span / opts.dt).ceil() as usize;
        n_sub = n_sub.max(2);
        if n_sub % 2 == 1 {
            n_sub += 1;
        }
        let mut ts = Vec::with_capacity(n_sub + 1);
        let mut ys = Vec::with_capacity(n_sub + 1);
        for i in 0..=n_sub {
            let t = t_k + span * (i as f64) / (n_sub as f64);
            let zt = sol.eval(t);
            ys.push(rom_output(c, ft, &zt, t, input)?);
            ts.push(t);
        }
        segments.push(SegmentTrace { mode: q, t: ts, y: ys });
        xi = sol.y_end;
    }
    Ok(TrajectoryRecord {
        segments,
        jumps,
        impulses: Vec::new(),
        l2_output: l2_output.max(0.0).sqrt(),
        l2_input: l2_input.max(0.0).sqrt(),
    })
}

fn rom_output(
    c: &DMatrix<f64>,
    feedthrough: &[DMatrix<f64>],
    xi: &DVector<f64>,
    t: f64,
    input: &InputSignal,
) -> Result<DVector<f64>, SimError> {
    let mut y = c * xi;
    for (i, d) in feedthrough.iter().enumerate() {
        y += d * input.eval_vec(t, i)?;
    }
    Ok(y)
}

/// Full-coordinate reference simulation used by the verification oracles:
/// the same segment/jump schedule, but the state lives in ℝⁿ and evolves
/// under the densified A^diff/B^diff with projector jumps. Shares the
/// integrator, not the formulation.
pub fn simulate_dense_reference(
    jf: &crate::jumpflow::JumpFlowForm,
    dense: &[crate::oracle::DenseModeData],
    chains: &[Vec<DMatrix<f64>>],
    signal: &SwitchingSignal,
    input: &InputSignal,
    opts: &SimOptions,
) -> Result<TrajectoryRecord, SimError> {
    let n = jf.n;
    let b_diff: Vec<DMatrix<f64>> = (0..jf.modes.len())
        .map(|q| {
            let md = &jf.modes[q];
            let mut out = DMatrix::zeros(n, jf.m);
            for c in 0..jf.m {
                out.set_column(
                    c,
                    &md.decomp
                        .core
                        .vhat_mul(&md.proj.b_diff_coords.column(c).into_owned()),
                );
            }
            out
        })
        .collect();
    let c_full: Vec<DMatrix<f64>> = (0..jf.modes.len())
        .map(|q| {
            // C^diff = (C V̂) V̂ᵀ Π = c_diff_coords · Y1 rows; as dense p×n
            let md = &jf.modes[q];
            let mut rows = DMatrix::zeros(jf.p, n);
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let col = &md.proj.c_diff_coords * md.decomp.core.y1(&e);
                rows.set_column(i, &col);
            }
            rows
        })
        .collect();

    let mut events: Vec<(f64, usize)> = signal
        .events
        .iter()
        .copied()
        .filter(|&(t, _)| t < signal.t_final)
        .collect();
    if events.is_empty() {
        events.push((signal.t0, signal.events[0].1));
    }
    let mut segments = Vec::new();
    let mut l2_output = 0.0;
    let mut x = DVector::<f64>::zeros(n);
    let mut q_prev: Option<usize> = None;
    for (k, &(t_k, q)) in events.iter().enumerate() {
        let t_next = if k + 1 < events.len() {
            events[k + 1].0
        } else {
            signal.t_final
        };
        if let Some(qp) = q_prev {
            let mut carry = x.clone();
            for (i, link) in chains[qp].iter().enumerate() {
                carry -= link * input.eval_vec(t_k, i)?;
            }
            x = jf.modes[q].decomp.core.pi(&carry);
        }
        q_prev = Some(q);
        let dm = &dense[q];
        let bq = &b_diff[q];
        let rhs = |t: f64, y: &DVector<f64>| -> DVector<f64> {
            let u = input.eval_vec(t, 0).expect("order-0 input");
            &dm.a_diff * y + bq * u
        };
        let sol = integrate(&rhs, t_k, t_next, x.clone(), opts)?;
        for step in &sol.steps {
            let mut ts = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            for i in 0..=8 {
                let t = step.t + step.h * (i as f64) / 8.0;
                let zt = step.eval(t);
                let y = dense_output(&c_full[q], &jf.modes[q].proj.feedthrough, &zt, t, input)?;
                ts.push(t);
                ys.push(y.norm_squared());
            }
            l2_output += simpson(&ts, &ys);
        }
        let span = t_next - t_k;
        let mut n_sub = (span / opts.dt).ceil() as usize;
        n_sub = n_sub.max(2);
        if n_sub % 2 == 1 {
            n_sub += 1;
        }
        let mut ts = Vec::with_capacity(n_sub + 1);
        let mut ys = Vec::with_capacity(n_sub + 1);
        for i in 0..=n_sub {
            let t = t_k + span * (i as f64) / (n_sub as f64);
            let zt = sol.eval(t);
            ys.push(dense_output(&c_full[q], &jf.modes[q].proj.feedthrough, &zt, t, input)?);
            ts.push(t);
        }
        segments.push(SegmentTrace { mode: q, t: ts, y: ys });
        x = sol.y_end;
    }
    Ok(TrajectoryRecord {
        segments,
        jumps: Vec::new(),
        impulses: Vec::new(),
        l2_output: l2_output.max(0.0).sqrt(),
        l2_input: 0.0,
    })
}

fn dense_output(
    c_rows: &DMatrix<f64>,
    feedthrough: &[DMatrix<f64>],
    x: &DVector<f64>,
    t: f64,
    input: &InputSignal,
) -> Result<DVector<f64>, SimError> {
    let mut y = c_rows * x;
    for (i, d) in feedthrough.iter().enumerate() {
        y += d * input.eval_vec(t, i)?;
    }
    Ok(y)
}

/// Absolute and input-relative L2 output error between two trajectories on
/// identical grids; impulse tables are compared entry-by-entry, never folded
/// into the L2 value.
pub fn output_error(
    fom: &TrajectoryRecord,
    rom: &TrajectoryRecord,
) -> Result<(f64, f64), SimError> {
    let abs = fom.l2_diff(rom)?;
    let rel = if fom.l2_input > 0.0 {
        abs / fom.l2_input
    } else {
        0.0
    };
    Ok((abs, rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densela::expm;
    use crate::inputs::InputFamily;
    use crate::jumpflow::reformulate_jumpflow;
    use crate::rng::SplitMix64;
    use crate::sparse::{sp_from_dense, sp_identity};
    use crate::system::{Mode, SwitchedSystem};
    use nalgebra::Complex;

    #[test]
    fn integrator_matches_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.0, -0.3]);
        let y0 = DVector::from_vec(vec![1.0, -0.5]);
        let opts = SimOptions::default();
        let f = |_t: f64, y: &DVector<f64>| &a * y;
        let sol = integrate(&f, 0.0, 3.0, y0.clone(), &opts).unwrap();
        let exact = expm(&(&a * 3.0)) * &y0;
        assert!((&sol.y_end - &exact).norm() < 1e-7);
        // dense output accuracy in the interior
        let t_mid = 1.234_567;
        let exact_mid = expm(&(&a * t_mid)) * &y0;
        assert!((sol.eval(t_mid) - exact_mid).norm() < 1e-7);
    }

    #[test]
    fn zero_input_zero_state_gives_zero_output() {
        let n = 3;
        let sys = SwitchedSystem::new(vec![Mode {
            e: sp_identity(n),
            a: sp_from_dense(&(-DMatrix::<f64>::identity(n, n))),
            b: DMatrix::from_element(n, 1, 1.0),
            c: DMatrix::from_element(1, n, 1.0),
        }])
        .unwrap();
        let jf = reformulate_jumpflow(&sys).unwrap();
        let sig = SwitchingSignal::constant(0, 0.0, 2.0);
        let input = InputSignal::new(InputFamily::Zero, 1);
        let tr = simulate_jumpflow(&jf, &sig, &input, &SimOptions::default(), None).unwrap();
        assert!(tr.l2_output < 1e-14);
        assert!(tr.impulses.is_empty());
    }

    #[test]
    fn lti_sin_input_matches_resolvent() {
        // x' = A x + b sin t from rest: x_p(t) = Im[(iI - A)^{-1} b e^{it}]
        let mut rng = SplitMix64::new(21);
        let n = 8;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (2.0 * n as f64);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.normal());
        let c = DMatrix::from_fn(2, n, |_, _| rng.normal());
        let sys = SwitchedSystem::new(vec![Mode {
            e: sp_identity(n),
            a: sp_from_dense(&a),
            b: b.clone(),
            c: c.clone(),
        }])
        .unwrap();
        let jf = reformulate_jumpflow(&sys).unwrap();
        let t_final = 4.0;
        let sig = SwitchingSignal::constant(0, 0.0, t_final);
        let input = InputSignal::new(InputFamily::Sin { a: 1.0, b: 0.0 }, 1);
        let opts = SimOptions::default();
        let tr = simulate_jumpflow(&jf, &sig, &input, &opts, None).unwrap();

        // reference by variation of constants in complex arithmetic
        let ac = a.map(|v| Complex::new(v, 0.0));
        let ii = DMatrix::from_diagonal_element(n, n, Complex::new(0.0, 1.0));
        let bc = b.map(|v| Complex::new(v, 0.0));
        let res = (ii - ac).lu().solve(&bc).unwrap();
        let x_part = |t: f64| -> DVector<f64> {
            let e = Complex::new(0.0, t).exp();
            DVector::from_fn(n, |i, _| (res[(i, 0)] * e).im)
        };
        // x(t) = e^{At}(x0 - x_p(0)) + x_p(t), x0 = 0
        // (the jump-flow state starts at the origin in reduced coordinates,
        // which is the full state for an ODE mode)
        let seg = &tr.segments[0];
        let core = &jf.modes[0].decomp.core;
        for (i, &t) in seg.t.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let hom = expm(&(&a * t)) * (-x_part(0.0));
            let x_ref = hom + x_part(t);
            let y_ref = &c * x_ref;
            // segment outputs are in original coordinates already
            let _ = core;
            assert!(
                (seg.y[i].clone() - y_ref).norm() < 1e-6,
                "t = {t}: mismatch"
            );
        }
    }

    #[test]
    fn dwell_invariance_spurious_event() {
        let mut rng = SplitMix64::new(33);
        let n = 6;
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            e[(i, i)] = 1.0 + rng.next_f64();
        }
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        a -= DMatrix::identity(n, n) * (2.0 * n as f64);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.normal());
        let c = DMatrix::from_fn(1, n, |_, _| rng.normal());
        let sys = SwitchedSystem::new(vec![Mode {
            e: sp_from_dense(&e),
            a: sp_from_dense(&a),
            b,
            c,
        }])
        .unwrap();
        let jf = reformulate_jumpflow(&sys).unwrap();
        let input = InputSignal::new(InputFamily::Sin { a: 1.0, b: 0.3 }, 1);
        let opts = SimOptions::default();
        let plain = SwitchingSignal::constant(0, 0.0, 2.0);
        let spurious = SwitchingSignal::new(0.0, vec![(0.0, 0), (1.0, 0)], 2.0).unwrap();
        let tr1 = simulate_jumpflow(&jf, &plain, &input, &opts, None).unwrap();
        let tr2 = simulate_jumpflow(&jf, &spurious, &input, &opts, None).unwrap();
        // compare on the final sampled values (grids differ by segmentation)
        let last1 = tr1.segments.last().unwrap().y.last().unwrap().clone();
        let last2 = tr2.segments.last().unwrap().y.last().unwrap().clone();
        assert!((last1 - last2).norm() < 1e-7);
        assert!((tr1.l2_output - tr2.l2_output).abs() < 1e-7);
        assert!(tr2.impulses.is_empty());
    }

    #[test]
    fn output_error_arithmetic() {
        // identical records: zero error
        let mk = |offset: f64| TrajectoryRecord {
            segments: vec![SegmentTrace {
                mode: 0,
                t: (0..=10).map(|i| i as f64 / 10.0).collect(),
                y: (0..=10)
                    .map(|_| DVector::from_element(1, offset))
                    .collect(),
            }],
            jumps: vec![],
            impulses: vec![],
            l2_output: 0.0,
            l2_input: 2.0,
        };
        let a = mk(0.0);
        let b = mk(1.0);
        let (abs, rel) = output_error(&a, &a).unwrap();
        assert_eq!(abs, 0.0);
        assert_eq!(rel, 0.0);
        // constant offset 1 on [0,1]: L2 = 1; input norm 2: rel = 0.5
        let (abs, rel) = output_error(&a, &b).unwrap();
        assert!((abs - 1.0).abs() < 1e-12);
        assert!((rel - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_detected() {
        let mk = |len: usize| TrajectoryRecord {
            segments: vec![SegmentTrace {
                mode: 0,
                t: (0..=len).map(|i| i as f64 / len as f64).collect(),
                y: (0..=len).map(|_| DVector::zeros(1)).collect(),
            }],
            jumps: vec![],
            impulses: vec![],
            l2_output: 0.0,
            l2_input: 1.0,
        };
        assert!(output_error(&mk(10), &mk(12)).is_err());
    }
}
