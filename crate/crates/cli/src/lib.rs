//! Command-line front end: field computation, verification sweeps and
//! regeneration of the figure data sets.

pub mod system;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ftme::dynamics::{BuiltinSystem, DEFAULT_STEPS_PER_UNIT};
use ftme::fieldio::{export_csv, export_pgm, FieldKind, Grid2D, ScalarField2D};
use ftme::lcs::{ftle_field, ftme_field, stretching_rate_field, AlphaPolicy, Direction};
use ftme::FtmeError;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::system::build_system;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Output(String),
    #[error(transparent)]
    Core(#[from] FtmeError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(FtmeError::InvalidInput(_) | FtmeError::NotPositiveDefinite) => 2,
            CliError::Output(_) | CliError::Core(FtmeError::Io { .. } | FtmeError::Parse { .. }) => 2,
            CliError::Numerical(_) | CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ftme", version, about = "Finite-time metric entropy and FTLE fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a scalar field on a grid and export it.
    Field(FieldArgs),
    /// Run a verification sweep; exits 1 if any check fails.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Regenerate the six figure data sets with a manifest.
    Figures(FiguresArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    /// linear-saddle, parabola, or linear (with --matrix)
    #[arg(long, default_value = "linear-saddle")]
    pub system: String,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub gamma: f64,
    /// Coefficient matrix as `a,b;c,d`
    #[arg(long, allow_hyphen_values = true)]
    pub matrix: Option<String>,
}

impl SystemArgs {
    fn build(&self) -> Result<BuiltinSystem, CliError> {
        build_system(&self.system, self.beta, self.gamma, self.matrix.as_deref())
    }
}

#[derive(Debug, Clone, Args)]
pub struct FieldArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// ftme-weighted, ftle-forward, ftle-backward or stretching-rate
    #[arg(long, default_value = "ftme-weighted")]
    pub kind: String,
    /// xmin:xmax:ymin:ymax:NXxNY
    #[arg(long, default_value = "-2:2:-2:2:201x201", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long = "T", allow_negative_numbers = true)]
    pub horizon: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS_PER_UNIT)]
    pub steps_per_unit: f64,
    /// Weight for ftme fields: stretching, lambda2, or a number
    #[arg(long, default_value = "stretching", allow_hyphen_values = true)]
    pub alpha: String,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Gray-scale window `lo:hi` for the PGM
    #[arg(long, allow_hyphen_values = true)]
    pub clip: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Finite-time Pesin sandwich on random exponents.
    Pesin {
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Exact planar entropy against Monte Carlo on random exponents.
    ExactMc {
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Monte Carlo on diag(kappa1, kappa2) against the exact value.
    Mc {
        #[arg(long, default_value_t = 2.0)]
        kappa1: f64,
        #[arg(long, default_value_t = 0.5)]
        kappa2: f64,
        #[arg(long, default_value_t = 10_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Norm-change bound for random positive-definite Gamma.
    Gamma {
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Entropy bounds near the saddle at the origin.
    Cones {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        #[arg(long = "T", default_value_t = 8.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEPS_PER_UNIT)]
        steps_per_unit: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct FiguresArgs {
    #[arg(long, default_value = "figures")]
    pub out: PathBuf,
    #[arg(long, default_value = "-2:2:-2:2:201x201", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long = "T", default_value_t = 2.0, allow_negative_numbers = true)]
    pub horizon: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS_PER_UNIT)]
    pub steps_per_unit: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{name} must be positive")))
    }
}

fn parse_grid(s: &str) -> Result<Grid2D, CliError> {
    s.parse::<Grid2D>().map_err(|e| CliError::Config(e.to_string()))
}

fn parse_clip(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("clip `{s}` is not lo:hi with lo < hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(hi > lo) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn check_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::Config(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

/// Computes one field kind for `sys`.
pub fn compute_field(
    sys: &BuiltinSystem,
    kind: FieldKind,
    grid: &Grid2D,
    horizon: f64,
    steps_per_unit: f64,
    policy: AlphaPolicy,
) -> Result<ScalarField2D, CliError> {
    let field = match kind {
        FieldKind::FtmeWeighted => ftme_field(sys, grid, horizon, steps_per_unit, policy)?,
        FieldKind::FtleForward => ftle_field(sys, grid, horizon, steps_per_unit, Direction::Forward)?,
        FieldKind::FtleBackward => ftle_field(sys, grid, horizon, steps_per_unit, Direction::Backward)?,
        FieldKind::StretchingRate => stretching_rate_field(sys, grid, horizon, steps_per_unit)?,
        FieldKind::Imported => return Err(CliError::Config("cannot compute an imported field".into())),
    };
    if field.valid_count() == 0 {
        return Err(CliError::Numerical("every grid node is masked".into()));
    }
    Ok(field)
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldLine {
    pub system: String,
    pub kind: String,
    pub grid: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub alpha: Option<String>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub valid: usize,
    pub total: usize,
}

fn field_line(sys: &BuiltinSystem, field: &ScalarField2D) -> FieldLine {
    let s = field.summary().expect("field has valid nodes");
    FieldLine {
        system: sys.name().to_string(),
        kind: field.meta.kind.name().to_string(),
        grid: field.grid().to_string(),
        horizon: field.meta.horizon.unwrap_or(f64::NAN),
        alpha: field.meta.alpha_policy.clone(),
        min: s.min,
        max: s.max,
        mean: s.mean,
        std: s.std,
        valid: s.valid,
        total: s.total,
    }
}

pub fn cmd_field(args: &FieldArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let horizon = positive("T", args.horizon)?;
    let spu = positive("steps-per-unit", args.steps_per_unit)?;
    let kind: FieldKind = args.kind.parse().map_err(|e: FtmeError| CliError::Config(e.to_string()))?;
    let policy: AlphaPolicy = args.alpha.parse().map_err(|e: FtmeError| CliError::Config(e.to_string()))?;
    let grid = parse_grid(&args.grid)?;
    let clip = args.clip.as_deref().map(parse_clip).transpose()?;
    let sys = args.system.build()?;
    for p in args.csv.iter().chain(args.pgm.iter()) {
        check_parent(p)?;
    }

    let field = compute_field(&sys, kind, &grid, horizon, spu, policy)?;
    if let Some(p) = &args.csv {
        export_csv(&field, p)?;
    }
    if let Some(p) = &args.pgm {
        export_pgm(&field, p, clip)?;
    }
    writeln!(out, "{}", serde_json::to_string(&field_line(&sys, &field)).expect("serializable"))
        .map_err(|e| CliError::Output(e.to_string()))?;
    Ok(0)
}

pub fn cmd_verify(cmd: &VerifyCommand, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = match cmd {
        VerifyCommand::Pesin { draws, seed } => verify::pesin(*draws, *seed)?,
        VerifyCommand::ExactMc { draws, samples, seed } => verify::exact_mc(*draws, *samples, *seed)?,
        VerifyCommand::Mc { kappa1, kappa2, samples, seed } => verify::mc(*kappa1, *kappa2, *samples, *seed)?,
        VerifyCommand::Gamma { draws, samples, seed } => verify::gamma(*draws, *samples, *seed)?,
        VerifyCommand::Cones { system, eps, horizon, delta, points, seed, steps_per_unit } => {
            let opts = verify::ConeOptions {
                eps: positive("eps", *eps)?,
                horizon: positive("T", *horizon)?,
                delta: positive("delta", *delta)?,
                points: *points,
                seed: *seed,
                steps_per_unit: positive("steps-per-unit", *steps_per_unit)?,
            };
            verify::cones(&system.build()?, &opts)?
        }
    };
    for line in &report.lines {
        writeln!(out, "{line}").map_err(|e| CliError::Output(e.to_string()))?;
    }
    Ok(if report.pass { 0 } else { 1 })
}

pub const FIGURE_SYSTEMS: [&str; 2] = ["linear-saddle", "parabola"];
pub const FIGURE_KINDS: [FieldKind; 3] = [FieldKind::FtmeWeighted, FieldKind::FtleForward, FieldKind::FtleBackward];

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub csv: String,
    pub pgm: String,
    #[serde(flatten)]
    pub summary: FieldLine,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub grid: Grid2D,
    pub steps_per_unit: f64,
    pub parabola: serde_json::Value,
    pub fields: Vec<ManifestEntry>,
}

pub fn cmd_figures(args: &FiguresArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let horizon = positive("T", args.horizon)?;
    let spu = positive("steps-per-unit", args.steps_per_unit)?;
    let grid = parse_grid(&args.grid)?;
    if args.out.exists() && !args.out.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", args.out.display())));
    }

    let mut computed = Vec::new();
    for name in FIGURE_SYSTEMS {
        let sys = build_system(name, 1.0, 1.0, None)?;
        for kind in FIGURE_KINDS {
            let mut field = compute_field(&sys, kind, &grid, horizon, spu, AlphaPolicy::Stretching)?;
            field.meta.seed = Some(args.seed);
            computed.push((sys.clone(), field));
        }
    }

    fs::create_dir_all(&args.out).map_err(|e| CliError::Output(format!("{}: {e}", args.out.display())))?;
    let mut entries = Vec::new();
    for (sys, field) in &computed {
        let stem = format!("{}_{}", sys.name(), field.meta.kind.name());
        let csv = format!("{stem}.csv");
        let pgm = format!("{stem}.pgm");
        export_csv(field, &args.out.join(&csv))?;
        export_pgm(field, &args.out.join(&pgm), None)?;
        entries.push(ManifestEntry { csv, pgm, summary: field_line(sys, field) });
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        horizon,
        grid,
        steps_per_unit: spu,
        parabola: json!({ "beta": 1.0, "gamma": 1.0 }),
        fields: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    let path = args.out.join("manifest.json");
    fs::write(&path, text).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    for e in &manifest.fields {
        writeln!(out, "{}", serde_json::to_string(e).expect("serializable"))
            .map_err(|e| CliError::Output(e.to_string()))?;
    }
    Ok(0)
}

/// Caps the worker pool at `FTME_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FTME_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Config(format!("FTME_THREADS must be a positive integer, got `{v}`")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{e}");
            return code;
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Field(a) => cmd_field(a, out),
        Command::Verify(v) => cmd_verify(v, out),
        Command::Figures(a) => cmd_figures(a, out),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
