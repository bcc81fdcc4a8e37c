//! Command-line front end: generation, reduction, certification, and
//! simulation of switched descriptor systems as reproducible batch runs.
//!
//! Exit codes: 0 success, 2 validation failure, 3 solver non-convergence,
//! 4 I/O failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use swmor::balance::{
    balance_truncate, build_bilinear_matrices, certified_error_bound, check_lmis,
    compute_gramians, GramianOptions, ScalingPolicy,
};
use swmor::bench;
use swmor::gle::GleError;
use swmor::inputs::{InputFamily, InputSignal};
use swmor::io;
use swmor::jumpflow::reformulate_jumpflow;
use swmor::sim::{output_error, simulate_jumpflow, simulate_rom, SimOptions};
use swmor::system::{validate_system, SwitchingSignal, TOL_ASSUME};

#[derive(Parser)]
#[command(name = "swmor", about = "Certified balanced truncation for switched descriptor systems", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark system bundle
    Generate(GenerateArgs),
    /// Reduce a system: decompose, solve Gramians, balance, certify
    Reduce(ReduceArgs),
    /// Simulate a system or a reduced bundle along a switching signal
    Simulate(SimulateArgs),
    /// Simulate both a system and its reduction, report the output error
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// benchmark family: msd | stokes | msd-jump
    family: String,
    /// masses (msd, msd-jump) or grid cells per side (stokes)
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    modes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// dwell time of the default round-robin signal written next to the bundle
    #[arg(long, default_value_t = 1.4285714285714286)]
    dwell: f64,
    /// horizon of the default signal
    #[arg(long, default_value_t = 10.0)]
    tfinal: f64,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    system: PathBuf,
    /// reduced order r
    #[arg(long)]
    order: usize,
    /// Gramian tolerance
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// include the input-jump reachability blocks
    #[arg(long)]
    input_jumps: bool,
    /// include the output-impulse observability blocks
    #[arg(long)]
    output_impulses: bool,
    /// force the conservative beta rescaling
    #[arg(long)]
    force_beta: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "rom")]
    system: Option<PathBuf>,
    #[arg(long)]
    rom: Option<PathBuf>,
    #[arg(long)]
    signal: PathBuf,
    /// input family: zero | sin | sin-exp | sin-quad | one | ramp
    #[arg(long, default_value = "sin")]
    input: String,
    #[arg(long)]
    tfinal: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 1e-8)]
    rtol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    rom: PathBuf,
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, default_value = "sin")]
    input: String,
    #[arg(long)]
    tfinal: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NOCONV: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Reduce(args) => cmd_reduce(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn io_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_IO, e.to_string())
}

fn val_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_VALIDATION, e.to_string())
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    let sys = match args.family.as_str() {
        "msd" => bench::gen_msd(args.size, args.modes, args.seed).map_err(val_err)?,
        "msd-jump" => bench::gen_msd_jump_pair(args.size, args.seed).map_err(val_err)?,
        "stokes" => bench::gen_stokes(args.size, args.modes, args.seed).map_err(val_err)?,
        other => return Err(val_err(format!("unknown benchmark family '{other}'"))),
    };
    io::write_system(&args.out, &sys).map_err(io_err)?;
    let signal = SwitchingSignal::round_robin(sys.num_modes(), 0.0, args.tfinal, args.dwell);
    io::write_signal(&args.out.join("signal.json"), &signal).map_err(io_err)?;
    println!(
        "generated {} (n = {}, m = {}, p = {}, M = {}) in {}",
        args.family,
        sys.n,
        sys.m,
        sys.p,
        sys.num_modes(),
        args.out.display()
    );
    Ok(())
}

fn solver_err(e: swmor::balance::BalanceError) -> (u8, String) {
    match &e {
        swmor::balance::BalanceError::Gle(GleError::NotConverged(_))
        | swmor::balance::BalanceError::Gle(GleError::Stagnation(_))
        | swmor::balance::BalanceError::Gle(GleError::MaxDimExceeded(_)) => {
            (EXIT_NOCONV, e.to_string())
        }
        _ => (EXIT_VALIDATION, e.to_string()),
    }
}

fn cmd_reduce(args: ReduceArgs) -> CmdResult {
    if args.order == 0 {
        return Err(val_err("reduced order must be at least 1"));
    }
    let sys = io::read_system(&args.system).map_err(io_err)?;
    let report = validate_system(&sys, TOL_ASSUME).map_err(val_err)?;
    if let Some(j) = report.modes.iter().position(|m| !m.regular) {
        return Err(val_err(format!("mode {} is not a regular pencil", j + 1)));
    }
    let jf = reformulate_jumpflow(&sys).map_err(val_err)?;
    let include_jumps = args.input_jumps || !report.assumption_i_all();
    let bd = build_bilinear_matrices(&jf, include_jumps, args.output_impulses)
        .map_err(solver_err)?;
    let mut gopts = GramianOptions::new(args.tol);
    if args.force_beta {
        gopts.scaling = ScalingPolicy::ForceBeta;
    }
    let (p, q) = compute_gramians(&bd, &gopts).map_err(solver_err)?;
    let bundle = balance_truncate(&p, &q, &bd, &sys, args.order).map_err(solver_err)?;
    if bundle.order_reduced {
        eprintln!(
            "warning: requested order {} exceeds the Hankel rank; reduced to {}",
            args.order, bundle.r
        );
    }
    let bound = certified_error_bound(&p, &q, &bundle, args.tol).map_err(solver_err)?;
    let lmi_pass = check_lmis(&p, &q, &bd).ok().map(|rep| rep.pass);

    io::write_rom(&args.out, &bundle).map_err(io_err)?;
    let cert = io::CertificateFile {
        schema_version: io::SCHEMA_VERSION,
        tol: args.tol,
        gamma: p.gamma.max(q.gamma),
        r: bundle.r,
        n_tilde: bound.n_tilde,
        hankel: bundle.hankel.clone(),
        structural_bound: bound.structural,
        practical_bound: bound.practical,
        certificate: bound.certificate,
        floor_term: bound.floor_term,
        tail_term: bound.tail_term,
        first_order: bound.first_order,
        exact_tail_neglected: bound.exact_tail_neglected,
        p_err_radius: p.err_radius,
        q_err_radius: q.err_radius,
        lmi_pass,
        notes: "first-order certified bound; exact Hankel tail beyond the computed ranks assumed negligible".into(),
    };
    io::write_certificate(&args.out.join("certificate.json"), &cert).map_err(io_err)?;
    let telemetry: Vec<(usize, f64, usize)> = p
        .inner_residuals
        .iter()
        .zip(p.basis_dims.iter())
        .enumerate()
        .map(|(k, (res, dim))| (k + 1, *res, *dim))
        .collect();
    io::write_telemetry_csv(&args.out.join("telemetry.csv"), &telemetry).map_err(io_err)?;
    println!(
        "reduced to r = {} (certificate {:.6e}, practical {:.6e}, lmi {:?})",
        bundle.r, bound.certificate, bound.practical, lmi_pass
    );
    Ok(())
}

fn load_signal(path: &PathBuf, tfinal: Option<f64>) -> Result<SwitchingSignal, (u8, String)> {
    let mut signal = io::read_signal(path).map_err(io_err)?;
    if let Some(t) = tfinal {
        signal.t_final = t;
    }
    Ok(signal)
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let signal = load_signal(&args.signal, args.tfinal)?;
    let family = InputFamily::parse(&args.input).map_err(val_err)?;
    let opts = SimOptions {
        rtol: args.rtol,
        dt: args.dt,
        ..SimOptions::default()
    };
    let record = if let Some(dir) = &args.system {
        let sys = io::read_system(dir).map_err(io_err)?;
        signal.validate_modes(sys.num_modes()).map_err(val_err)?;
        let jf = reformulate_jumpflow(&sys).map_err(val_err)?;
        let input = InputSignal::new(family, sys.m);
        simulate_jumpflow(&jf, &signal, &input, &opts, None).map_err(val_err)?
    } else if let Some(dir) = &args.rom {
        let rom = io::read_rom(dir).map_err(io_err)?;
        let m = rom.b_red.first().map(|b| b.ncols()).unwrap_or(1);
        let input = InputSignal::new(family, m);
        simulate_rom(&rom, &signal, &input, &opts).map_err(val_err)?
    } else {
        return Err(val_err("one of --system or --rom is required"));
    };
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    io::write_trajectory_csv(&args.out.join("trajectory.csv"), &record).map_err(io_err)?;
    io::write_impulses_json(&args.out.join("impulses.json"), &record).map_err(io_err)?;
    println!(
        "simulated: |y|_L2 = {:.6e}, |u|_L2 = {:.6e}, {} jumps, {} impulse records",
        record.l2_output,
        record.l2_input,
        record.jumps.len(),
        record.impulses.len()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let signal = load_signal(&args.signal, args.tfinal)?;
    let family = InputFamily::parse(&args.input).map_err(val_err)?;
    let sys = io::read_system(&args.system).map_err(io_err)?;
    signal.validate_modes(sys.num_modes()).map_err(val_err)?;
    let rom = io::read_rom(&args.rom).map_err(io_err)?;
    let opts = SimOptions {
        dt: args.dt,
        ..SimOptions::default()
    };
    let jf = reformulate_jumpflow(&sys).map_err(val_err)?;
    let input = InputSignal::new(family, sys.m);
    let fom_tr = simulate_jumpflow(&jf, &signal, &input, &opts, None).map_err(val_err)?;
    let rom_tr = simulate_rom(&rom, &signal, &input, &opts).map_err(val_err)?;
    let (abs, rel) = output_error(&fom_tr, &rom_tr).map_err(val_err)?;
    let cert = io::read_certificate(&args.rom.join("certificate.json")).ok();
    let (bound, dominated) = match &cert {
        Some(c) => (Some(c.certificate), Some(rel <= c.certificate)),
        None => (None, None),
    };
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    io::write_trajectory_csv(&args.out.join("fom.csv"), &fom_tr).map_err(io_err)?;
    io::write_trajectory_csv(&args.out.join("rom.csv"), &rom_tr).map_err(io_err)?;
    let report = serde_json::json!({
        "abs_l2": abs,
        "rel_to_input": rel,
        "certificate": bound,
        "bound_dominates": dominated,
        "fom_l2_output": fom_tr.l2_output,
        "input_l2": fom_tr.l2_input,
    });
    std::fs::write(
        args.out.join("error.json"),
        serde_json::to_string_pretty(&report).map_err(io_err)?,
    )
    .map_err(io_err)?;
    let verdict = match dominated {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "N/A",
    };
    println!("abs L2 error {abs:.6e}, relative {rel:.6e}, bound dominance: {verdict}");
    Ok(())
}
