//! The `densmatch` command-line tool.
//!
//! Subcommands cover the registration pipeline end to end: `register` runs
//! the descent and writes the inverse map (absolute positions), its Jacobian
//! determinant, and a CSV energy trace; `apply` pushes a density through a
//! stored transform; `distance` prints density distances; `phantom` generates
//! synthetic pairs with known ground truth; `jacobian` recomputes a map's
//! Jacobian by finite differences. Exit codes: 0 success, 1 usage error,
//! 2 data/validation error, 3 registration divergence.

use crate::density::{fisher_rao_sphere, hellinger_sq, pushforward, Density};
use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::io::{read_vector_volume, read_volume, write_trace, write_vector_volume, write_volume};
use crate::matching::{
    register, sigmoid_penalty, InverseTransform, Penalty, RegistrationConfig,
};
use crate::phantom::{make_pair, RadialBump, TwoCompartment};
use crate::validate::run_selfcheck;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "densmatch",
    version,
    about = "Diffeomorphic density registration under the Fisher\u{2013}Rao metric"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source density onto a target and write the transform.
    Register(RegisterArgs),
    /// Push a density through a stored transform (mass-preserving).
    Apply(ApplyArgs),
    /// Print the squared Hellinger distance (or the arccos sphere distance).
    Distance(DistanceArgs),
    /// Generate a synthetic pair with known ground truth.
    Phantom(PhantomArgs),
    /// Recompute a map's Jacobian determinant by finite differences.
    Jacobian(JacobianArgs),
    /// Run all numerical audits at 32 cubed and print a pass/fail table.
    #[command(hide = true)]
    Selfcheck,
}

#[derive(Args)]
struct RegisterArgs {
    /// Source density volume (.mha, or .mhd + .raw).
    #[arg(long)]
    source: PathBuf,
    /// Target density volume.
    #[arg(long)]
    target: PathBuf,
    /// Penalty volume on the source grid (defaults to a constant 1).
    #[arg(long, conflicts_with = "penalty_sigmoid")]
    penalty: Option<PathBuf>,
    /// Sigmoid penalty from source intensities: low,high,midpoint,steepness.
    #[arg(long, value_name = "L,H,M,S", value_parser = parse_sigmoid)]
    penalty_sigmoid: Option<SigmoidSpec>,
    /// Descent step size.
    #[arg(long)]
    eps: f64,
    /// Maximum number of iterations.
    #[arg(long)]
    iters: usize,
    /// Halve the step until the energy decreases, recovering afterwards.
    #[arg(long)]
    backtrack: bool,
    /// Zero-padding margin in voxels around the domain.
    #[arg(long, default_value_t = 8, value_name = "K")]
    pad: usize,
    /// Output inverse map, written as three volumes suffixed _x/_y/_z.
    #[arg(long)]
    out_map: PathBuf,
    /// Output Jacobian-determinant volume.
    #[arg(long)]
    out_jacdet: PathBuf,
    /// Output energy trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Stop when the relative energy decrease over a 10-iteration window
    /// falls below this.
    #[arg(long, default_value_t = 0.0)]
    stop_tol: f64,
    /// Non-negative shift of the smoothing operator (0 keeps the pure
    /// inverse Laplacian).
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Rebuild the Jacobian from the map every N iterations (0 = never).
    #[arg(long, default_value_t = 0, value_name = "N")]
    jacdet_refresh: usize,
    /// Emit a trace row every N iterations (0 = first and last only).
    #[arg(long, default_value_t = 1, value_name = "N")]
    trace_every: usize,
    /// Backtracking shrink factor in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    shrink: f64,
}

#[derive(Args)]
struct ApplyArgs {
    /// Density to push forward.
    #[arg(long)]
    density: PathBuf,
    /// Inverse map (reads the _x/_y/_z volumes for this path).
    #[arg(long)]
    map: PathBuf,
    /// Jacobian-determinant volume of the map.
    #[arg(long)]
    jacdet: PathBuf,
    /// Output volume.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Print the finite-volume arccos (sphere) distance instead of the
    /// squared Hellinger distance.
    #[arg(long)]
    sphere: bool,
}

#[derive(Args)]
struct PhantomArgs {
    /// Which phantom to generate.
    #[arg(long, value_enum)]
    kind: PhantomKind,
    /// Grid size as NX,NY,NZ (the domain is the unit cube).
    #[arg(long, value_name = "NX,NY,NZ", value_parser = parse_size)]
    size: Size,
    /// Prefix for the output files
    /// (<prefix>_source.mha, _target.mha, _map_*.mha, _jacdet.mha, ...).
    #[arg(long)]
    out_prefix: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    /// Gaussian blob displaced by a radial bump.
    Bump,
    /// Compressing core inside a rigid shell, with a matched penalty volume.
    TwoCompartment,
}

#[derive(Args)]
struct JacobianArgs {
    /// Inverse map (reads the _x/_y/_z volumes for this path).
    #[arg(long)]
    map: PathBuf,
    /// Output volume.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct SigmoidSpec {
    low: f64,
    high: f64,
    midpoint: f64,
    steepness: f64,
}

fn parse_sigmoid(s: &str) -> std::result::Result<SigmoidSpec, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected low,high,midpoint,steepness, got `{s}`"));
    }
    let mut v = [0.0f64; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("`{part}` is not a number"))?;
    }
    Ok(SigmoidSpec {
        low: v[0],
        high: v[1],
        midpoint: v[2],
        steepness: v[3],
    })
}

#[derive(Clone, Copy, Debug)]
struct Size([usize; 3]);

fn parse_size(s: &str) -> std::result::Result<Size, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected NX,NY,NZ, got `{s}`"));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("`{part}` is not a positive integer"))?;
    }
    Ok(Size(dims))
}

/// Parse `argv` and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version arrive as Err but are not usage errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err @ Error::Diverged) => {
            eprintln!("error: {err}");
            3
        }
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Register(args) => cmd_register(args),
        Command::Apply(args) => cmd_apply(args),
        Command::Distance(args) => cmd_distance(args),
        Command::Phantom(args) => cmd_phantom(args),
        Command::Jacobian(args) => cmd_jacobian(args),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn cmd_register(args: RegisterArgs) -> Result<i32> {
    let i0 = Density::new(read_volume(&args.source)?)?;
    let i1 = Density::new(read_volume(&args.target)?)?;
    let f = if let Some(path) = &args.penalty {
        Penalty::new(read_volume(path)?)?
    } else if let Some(s) = args.penalty_sigmoid {
        sigmoid_penalty(&i0, s.low, s.high, s.midpoint, s.steepness)?
    } else {
        Penalty::constant(*i0.geometry(), 1.0)?
    };
    let cfg = RegistrationConfig {
        step_size: args.eps,
        max_iters: args.iters,
        backtracking: args.backtrack,
        backtrack_shrink: args.shrink,
        stop_tol: args.stop_tol,
        jacdet_refresh_period: args.jacdet_refresh,
        gamma: args.gamma,
        trace_every: args.trace_every,
        pad_margin: args.pad,
        ..RegistrationConfig::default()
    };
    let result = register(&i0, &i1, &f, &cfg)?;
    write_vector_volume(result.transform.map(), &args.out_map)?;
    write_volume(result.transform.jacdet(), &args.out_jacdet)?;
    write_trace(&result.trace, &args.trace)?;
    let last = result.trace.last().expect("trace is never empty");
    println!(
        "{} iterations, energy {:.8e} -> {:.8e}",
        result.iterations,
        result.trace[0].total,
        last.total
    );
    Ok(0)
}

fn cmd_apply(args: ApplyArgs) -> Result<i32> {
    let d = Density::new(read_volume(&args.density)?)?;
    let map = read_vector_volume(&args.map)?;
    let jacdet = read_volume(&args.jacdet)?;
    let t = InverseTransform::new(map, jacdet)?;
    let out = pushforward(&d, &t)?;
    write_volume(out.grid(), &args.out)?;
    Ok(0)
}

fn cmd_distance(args: DistanceArgs) -> Result<i32> {
    let a = Density::new(read_volume(&args.a)?)?;
    let b = Density::new(read_volume(&args.b)?)?;
    let value = if args.sphere {
        fisher_rao_sphere(&a, &b)?
    } else {
        hellinger_sq(&a, &b)?
    };
    println!("{value:.14e}");
    Ok(0)
}

fn unit_cube_geometry(dims: [usize; 3]) -> Result<GridGeometry> {
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        if dims[a] < 2 {
            return Err(Error::InvalidGeometry(format!(
                "phantom size must be at least 2 per axis, got {}",
                dims[a]
            )));
        }
        spacing[a] = 1.0 / (dims[a] - 1) as f64;
    }
    GridGeometry::new(dims, spacing, [0.0; 3])
}

fn cmd_phantom(args: PhantomArgs) -> Result<i32> {
    let g = unit_cube_geometry(args.size.0)?;
    let out = |suffix: &str| PathBuf::from(format!("{}_{suffix}", args.out_prefix));
    let (i0, i1, truth, penalty) = match args.kind {
        PhantomKind::Bump => {
            let c = g.center();
            let bump = RadialBump::new(0.12, 0.3, c)?;
            let blob = move |p: [f64; 3]| {
                let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                0.05 + (-r2 / (0.2f64 * 0.2)).exp()
            };
            let (i0, i1, truth) = make_pair(g, blob, &bump)?;
            (i0, i1, truth, None)
        }
        PhantomKind::TwoCompartment => {
            let phantom = TwoCompartment::standard(g.center());
            let (i0, i1, f) = phantom.build(g)?;
            let truth = phantom.true_transform(g)?;
            (i0, i1, truth, Some(f))
        }
    };
    write_volume(i0.grid(), &out("source.mha"))?;
    write_volume(i1.grid(), &out("target.mha"))?;
    write_vector_volume(truth.map(), &out("map.mha"))?;
    write_volume(truth.jacdet(), &out("jacdet.mha"))?;
    if let Some(f) = penalty {
        write_volume(f.grid(), &out("penalty.mha"))?;
    }
    Ok(0)
}

fn cmd_jacobian(args: JacobianArgs) -> Result<i32> {
    let map = read_vector_volume(&args.map)?;
    write_volume(&map.jacobian_determinant_fd(), &args.out)?;
    Ok(0)
}

fn cmd_selfcheck() -> Result<i32> {
    let report = run_selfcheck()?;
    for r in &report.rows {
        println!(
            "{:<28} {:>12.4e}  (bound {:>8.1e})  {}",
            r.name,
            r.measured,
            r.bound,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.all_passed() { 0 } else { 2 })
}
