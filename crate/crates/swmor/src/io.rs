//! On-disk formats: JSON manifests referencing Matrix Market files for
//! systems and reduced bundles, JSON switching signals, and CSV emitters
//! with full float precision. Identical inputs and seeds must reproduce the
//! files byte-for-byte, so all floats print with 17 significant digits and
//! iteration orders are fixed.

use crate::balance::RomBundle;
use crate::sim::TrajectoryRecord;
use crate::sparse::{self, SparseError};
use crate::system::{Mode, SwitchedSystem, SwitchingSignal, SystemError};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Serialize, Deserialize)]
struct ModeFiles {
    e: String,
    a: String,
    b: String,
    c: String,
}

#[derive(Serialize, Deserialize)]
struct SystemManifest {
    schema_version: u32,
    n: usize,
    m: usize,
    p: usize,
    #[serde(rename = "M")]
    num_modes: usize,
    modes: Vec<ModeFiles>,
}

fn write_mm(path: &Path, m: &sparse::SpMat) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    sparse::write_matrix_market(&mut w, m)?;
    Ok(())
}

fn read_mm(path: &Path) -> Result<sparse::SpMat, IoError> {
    let r = BufReader::new(File::open(path)?);
    Ok(sparse::read_matrix_market(r)?)
}

/// Write a switched system bundle (manifest + Matrix Market files).
pub fn write_system(dir: &Path, sys: &SwitchedSystem) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let mut modes = Vec::new();
    for (j, mode) in sys.modes.iter().enumerate() {
        let files = ModeFiles {
            e: format!("E{}.mtx", j + 1),
            a: format!("A{}.mtx", j + 1),
            b: format!("B{}.mtx", j + 1),
            c: format!("C{}.mtx", j + 1),
        };
        write_mm(&dir.join(&files.e), &mode.e)?;
        write_mm(&dir.join(&files.a), &mode.a)?;
        write_mm(&dir.join(&files.b), &sparse::sp_from_dense(&mode.b))?;
        write_mm(&dir.join(&files.c), &sparse::sp_from_dense(&mode.c))?;
        modes.push(files);
    }
    let manifest = SystemManifest {
        schema_version: SCHEMA_VERSION,
        n: sys.n,
        m: sys.m,
        p: sys.p,
        num_modes: sys.num_modes(),
        modes,
    };
    let f = BufWriter::new(File::create(dir.join("system.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Read a switched system bundle.
pub fn read_system(dir: &Path) -> Result<SwitchedSystem, IoError> {
    let f = BufReader::new(File::open(dir.join("system.json"))?);
    let manifest: SystemManifest = serde_json::from_reader(f)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaVersion(manifest.schema_version));
    }
    let mut modes = Vec::new();
    for files in &manifest.modes {
        let e = read_mm(&dir.join(&files.e))?;
        let a = read_mm(&dir.join(&files.a))?;
        let b = sparse::sp_to_dense(&read_mm(&dir.join(&files.b))?);
        let c = sparse::sp_to_dense(&read_mm(&dir.join(&files.c))?);
        modes.push(Mode { e, a, b, c });
    }
    Ok(SwitchedSystem::new(modes)?)
}

#[derive(Serialize, Deserialize)]
struct SignalEvent {
    t: f64,
    /// 1-based mode index
    mode: usize,
}

#[derive(Serialize, Deserialize)]
struct SignalFile {
    t0: f64,
    #[serde(rename = "tFinal")]
    t_final: f64,
    events: Vec<SignalEvent>,
}

/// Write a switching signal (modes serialized 1-based).
pub fn write_signal(path: &Path, signal: &SwitchingSignal) -> Result<(), IoError> {
    let file = SignalFile {
        t0: signal.t0,
        t_final: signal.t_final,
        events: signal
            .events
            .iter()
            .map(|&(t, mode)| SignalEvent { t, mode: mode + 1 })
            .collect(),
    };
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, &file)?;
    Ok(())
}

/// Read a switching signal.
pub fn read_signal(path: &Path) -> Result<SwitchingSignal, IoError> {
    let f = BufReader::new(File::open(path)?);
    let file: SignalFile = serde_json::from_reader(f)?;
    let events = file
        .events
        .iter()
        .map(|e| (e.t, e.mode.saturating_sub(1)))
        .collect();
    Ok(SwitchingSignal::new(file.t0, events, file.t_final)?)
}

/// Trajectory CSV: `t,y1,...,yp` rows with 17-significant-digit floats.
pub fn write_trajectory_csv(path: &Path, tr: &TrajectoryRecord) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let p = tr
        .segments
        .first()
        .and_then(|s| s.y.first())
        .map(|y| y.len())
        .unwrap_or(0);
    write!(w, "t")?;
    for i in 1..=p {
        write!(w, ",y{i}")?;
    }
    writeln!(w)?;
    for seg in &tr.segments {
        for (t, y) in seg.t.iter().zip(seg.y.iter()) {
            write!(w, "{t:.17e}")?;
            for v in y.iter() {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Impulse table JSON: list of {t, order, coeff[]}.
pub fn write_impulses_json(path: &Path, tr: &TrajectoryRecord) -> Result<(), IoError> {
    #[derive(Serialize)]
    struct Entry {
        t: f64,
        order: usize,
        coeff: Vec<f64>,
    }
    let entries: Vec<Entry> = tr
        .impulses
        .iter()
        .map(|r| Entry {
            t: r.t,
            order: r.order,
            coeff: r.coeff.iter().copied().collect(),
        })
        .collect();
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, &entries)?;
    Ok(())
}

/// Reduction certificate JSON.
#[derive(Serialize, Deserialize)]
pub struct CertificateFile {
    pub schema_version: u32,
    pub tol: f64,
    pub gamma: f64,
    pub r: usize,
    pub n_tilde: usize,
    pub hankel: Vec<f64>,
    pub structural_bound: f64,
    pub practical_bound: f64,
    pub certificate: f64,
    pub floor_term: f64,
    pub tail_term: f64,
    pub first_order: bool,
    pub exact_tail_neglected: bool,
    pub p_err_radius: f64,
    pub q_err_radius: f64,
    pub lmi_pass: Option<bool>,
    pub notes: String,
}

pub fn write_certificate(path: &Path, cert: &CertificateFile) -> Result<(), IoError> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, cert)?;
    Ok(())
}

pub fn read_certificate(path: &Path) -> Result<CertificateFile, IoError> {
    let f = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

#[derive(Serialize, Deserialize)]
struct RomManifest {
    schema_version: u32,
    r: usize,
    mode1: usize,
    num_modes: usize,
    hankel: Vec<f64>,
    order_reduced: bool,
    /// per-mode feedthrough block counts
    feedthrough_counts: Vec<usize>,
    /// jump_input[k][j] block counts
    jump_input_counts: Vec<Vec<usize>>,
}

/// Write a reduced bundle: the reduced flow system, jump maps, projections,
/// feedthrough blocks, Hankel values.
pub fn write_rom(dir: &Path, rom: &RomBundle) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let sys = rom.to_system()?;
    write_system(dir, &sys)?;
    write_mm(&dir.join("V.mtx"), &sparse::sp_from_dense(&rom.v))?;
    write_mm(&dir.join("W.mtx"), &sparse::sp_from_dense(&rom.w))?;
    let m_modes = rom.num_modes();
    for k in 0..m_modes {
        for j in 0..m_modes {
            write_mm(
                &dir.join(format!("J{}_{}.mtx", k + 1, j + 1)),
                &sparse::sp_from_dense(&rom.jump[k][j]),
            )?;
            for (i, block) in rom.jump_input[k][j].iter().enumerate() {
                write_mm(
                    &dir.join(format!("JI{}_{}_{}.mtx", k + 1, j + 1, i)),
                    &sparse::sp_from_dense(block),
                )?;
            }
        }
    }
    for (j, blocks) in rom.feedthrough.iter().enumerate() {
        for (i, d) in blocks.iter().enumerate() {
            write_mm(
                &dir.join(format!("D{}_{}.mtx", j + 1, i)),
                &sparse::sp_from_dense(d),
            )?;
        }
    }
    let manifest = RomManifest {
        schema_version: SCHEMA_VERSION,
        r: rom.r,
        mode1: rom.mode1,
        num_modes: m_modes,
        hankel: rom.hankel.clone(),
        order_reduced: rom.order_reduced,
        feedthrough_counts: rom.feedthrough.iter().map(|b| b.len()).collect(),
        jump_input_counts: rom
            .jump_input
            .iter()
            .map(|row| row.iter().map(|b| b.len()).collect())
            .collect(),
    };
    let f = BufWriter::new(File::create(dir.join("rom.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Read a reduced bundle back.
pub fn read_rom(dir: &Path) -> Result<RomBundle, IoError> {
    let f = BufReader::new(File::open(dir.join("rom.json"))?);
    let manifest: RomManifest = serde_json::from_reader(f)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaVersion(manifest.schema_version));
    }
    let sys = read_system(dir)?;
    let v = sparse::sp_to_dense(&read_mm(&dir.join("V.mtx"))?);
    let w = sparse::sp_to_dense(&read_mm(&dir.join("W.mtx"))?);
    let m_modes = manifest.num_modes;
    let mut jump = Vec::with_capacity(m_modes);
    let mut jump_input = Vec::with_capacity(m_modes);
    for k in 0..m_modes {
        let mut row = Vec::with_capacity(m_modes);
        let mut row_inputs = Vec::with_capacity(m_modes);
        for j in 0..m_modes {
            row.push(sparse::sp_to_dense(&read_mm(
                &dir.join(format!("J{}_{}.mtx", k + 1, j + 1)),
            )?));
            let count = manifest.jump_input_counts[k][j];
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                blocks.push(sparse::sp_to_dense(&read_mm(
                    &dir.join(format!("JI{}_{}_{}.mtx", k + 1, j + 1, i)),
                )?));
            }
            row_inputs.push(blocks);
        }
        jump.push(row);
        jump_input.push(row_inputs);
    }
    let mut feedthrough = Vec::new();
    for (j, &count) in manifest.feedthrough_counts.iter().enumerate() {
        let mut blocks = Vec::new();
        for i in 0..count {
            blocks.push(sparse::sp_to_dense(&read_mm(
                &dir.join(format!("D{}_{}.mtx", j + 1, i)),
            )?));
        }
        feedthrough.push(blocks);
    }
    let a_red: Vec<DMatrix<f64>> = sys.modes.iter().map(|m| sparse::sp_to_dense(&m.a)).collect();
    let b_red: Vec<DMatrix<f64>> = sys.modes.iter().map(|m| m.b.clone()).collect();
    let c_red: Vec<DMatrix<f64>> = sys.modes.iter().map(|m| m.c.clone()).collect();
    Ok(RomBundle {
        a_red,
        b_red,
        c_red,
        jump,
        jump_input,
        v,
        w,
        hankel: manifest.hankel,
        r: manifest.r,
        feedthrough,
        mode1: manifest.mode1,
        order_reduced: manifest.order_reduced,
    })
}

/// Solver telemetry CSV: per-iteration residual and basis dimension rows.
pub fn write_telemetry_csv(
    path: &Path,
    rows: &[(usize, f64, usize)],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,inner_residual,basis_dim")?;
    for (k, res, dim) in rows {
        writeln!(w, "{k},{res:.17e},{dim}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench;

    #[test]
    fn system_round_trip() {
        let dir = std::env::temp_dir().join("swmor_io_test_system");
        let _ = fs::remove_dir_all(&dir);
        let sys = bench::gen_msd(4, 2, 9).unwrap();
        write_system(&dir, &sys).unwrap();
        let back = read_system(&dir).unwrap();
        assert_eq!(back.n, sys.n);
        assert_eq!(back.num_modes(), 2);
        for j in 0..2 {
            assert_eq!(
                sparse::sp_to_dense(&back.modes[j].a),
                sparse::sp_to_dense(&sys.modes[j].a)
            );
            assert_eq!(back.modes[j].b, sys.modes[j].b);
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn signal_round_trip_one_based() {
        let dir = std::env::temp_dir().join("swmor_io_test_signal");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let sig = SwitchingSignal::new(0.0, vec![(0.0, 0), (1.5, 2)], 4.0).unwrap();
        let path = dir.join("signal.json");
        write_signal(&path, &sig).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mode\": 1"), "serialized 1-based");
        let back = read_signal(&path).unwrap();
        assert_eq!(back.events, vec![(0.0, 0), (1.5, 2)]);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn deterministic_bytes() {
        let dir1 = std::env::temp_dir().join("swmor_io_det1");
        let dir2 = std::env::temp_dir().join("swmor_io_det2");
        let _ = fs::remove_dir_all(&dir1);
        let _ = fs::remove_dir_all(&dir2);
        write_system(&dir1, &bench::gen_msd(4, 3, 42).unwrap()).unwrap();
        write_system(&dir2, &bench::gen_msd(4, 3, 42).unwrap()).unwrap();
        for f in ["system.json", "A2.mtx", "E3.mtx", "B2.mtx"] {
            assert_eq!(
                fs::read(dir1.join(f)).unwrap(),
                fs::read(dir2.join(f)).unwrap(),
                "{f} must be byte-identical"
            );
        }
        let _ = fs::remove_dir_all(&dir1);
        let _ = fs::remove_dir_all(&dir2);
    }
}
