//! mvreg: registers a labeled surface mesh to multi-view 2D contour
//! observations, plus the synthesis, calibration, and evaluation commands
//! around it.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 bad geometry or data,
//! 3 algorithmic failure (no valid pose found).

mod cmds;
mod config;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use mvreg_core::registration::RegistrationMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Algorithm(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Algorithm(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Algorithm(m) => f.write_str(m),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Match contours only against silhouette samples of the same class
    Substructure,
    /// Ignore substructure labels; whole-silhouette matching
    Silhouette,
}

impl From<ModeArg> for RegistrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Substructure => RegistrationMode::Substructure,
            ModeArg::Silhouette => RegistrationMode::SilhouetteOnly,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mvreg",
    version,
    about = "Multi-view 2D/3D contour registration of labeled surface meshes"
)]
struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; overrides every per-section seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: MVREG_JOBS or all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
pub struct SegmentArgs {
    /// Surface mesh to label (ASCII PLY)
    pub mesh: PathBuf,
    /// Output labeled PLY
    #[arg(short, long)]
    pub out: PathBuf,
    /// Pass a fully labeled mesh through unchanged
    #[arg(long)]
    pub keep_labels: bool,
    /// Condyle split plane override: px,py,pz,nx,ny,nz in mm
    #[arg(long, value_name = "P,N", allow_hyphen_values = true)]
    pub split_plane: Option<String>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Scene whose views carry unordered bead detections
    pub scene: PathBuf,
    /// Fiducial cage model (JSON)
    #[arg(long, value_name = "FILE")]
    pub fiducial: PathBuf,
    /// Output scene with solved extrinsics
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RegisterArgs {
    /// Scene with calibrated views and contour observations
    pub scene: PathBuf,
    /// Labeled surface mesh (ASCII PLY)
    #[arg(long, value_name = "FILE")]
    pub mesh: PathBuf,
    /// Output registration report (JSON)
    #[arg(short, long)]
    pub out: PathBuf,
    /// Correspondence mode (default from config: substructure)
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Registration view ids, comma separated (default: the scene's list)
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<String>,
    /// Initial pose guess tx,ty,tz,phi,theta,psi in mm and degrees
    /// (default: 30,-40,5,-17.18,0,17.18)
    #[arg(long, allow_hyphen_values = true, value_name = "POSE")]
    pub init: Option<String>,
    /// Retry from randomized spins when the fit stalls
    #[arg(long)]
    pub restart: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Registration reports to score (JSON, one or more)
    #[arg(required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Scene with ground truth and control views
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    /// Labeled surface mesh the reports refer to
    #[arg(long, value_name = "FILE")]
    pub mesh: PathBuf,
    /// Output metrics JSON (a CSV sibling is written next to it)
    #[arg(short, long)]
    pub out: PathBuf,
    /// Control view ids, comma separated (default: the scene's list)
    #[arg(long, value_delimiter = ',')]
    pub control_views: Vec<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Scene with ground truth (synthetic)
    pub scene: PathBuf,
    /// Labeled surface mesh
    #[arg(long, value_name = "FILE")]
    pub mesh: PathBuf,
    /// Output CSV; .summary.json and .plot.tsv siblings are written too
    #[arg(short, long)]
    pub out: PathBuf,
    /// Number of random-init runs
    #[arg(long)]
    pub runs: Option<usize>,
    /// Correspondence mode for every run
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Enable restart on stalled fits
    #[arg(long)]
    pub restart: bool,
    /// Half-range of initial translation offsets, mm
    #[arg(long, value_name = "MM")]
    pub translation_range: Option<f64>,
    /// Half-range of initial Euler angle offsets, degrees
    #[arg(long, value_name = "DEG")]
    pub rotation_range: Option<f64>,
}

#[derive(Args)]
pub struct DemoArgs {
    /// Directory for all demo artifacts
    #[arg(short, long, default_value = "demo_out")]
    pub out: PathBuf,
    /// Runs in the closing robustness sweep
    #[arg(long, default_value_t = 5)]
    pub sweep_runs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Label a surface mesh into shaft and condyle substructures
    Segment(SegmentArgs),
    /// Solve view extrinsics from unordered bead detections
    Calibrate(CalibrateArgs),
    /// Fit the mesh pose to the scene's contour observations
    Register(RegisterArgs),
    /// Score fitted poses against held-out control views
    Evaluate(EvaluateArgs),
    /// Re-register from many random initial poses and tabulate robustness
    Sweep(SweepArgs),
    /// Generate a synthetic dataset and walk the whole pipeline
    Demo(DemoArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
        config.registration.rng_seed = s;
        config.calibration.rng_seed = s;
        config.sweep.seed = s;
    }
    if let Some(j) = cli.jobs.or_else(|| {
        std::env::var("MVREG_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    }) {
        config.jobs = j;
    }
    #[cfg(feature = "parallel")]
    if config.jobs > 0 {
        let _ = mvreg_core::batch::configure_jobs(config.jobs);
    }
    #[cfg(not(feature = "parallel"))]
    if config.jobs > 1 {
        eprintln!("warning: built without the parallel feature; jobs setting has no effect");
    }

    let cmdline = std::iter::once("mvreg".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ");
    match &cli.command {
        Cmd::Segment(a) => cmds::cmd_segment(a, &config, &cmdline),
        Cmd::Calibrate(a) => cmds::cmd_calibrate(a, &config, &cmdline),
        Cmd::Register(a) => {
            if let Some(m) = a.mode {
                config.registration.mode = m.into();
            }
            cmds::cmd_register(a, &config, &cmdline)
        }
        Cmd::Evaluate(a) => cmds::cmd_evaluate(a, &config, &cmdline),
        Cmd::Sweep(a) => {
            if let Some(n) = a.runs {
                config.sweep.n_runs = n;
            }
            if let Some(m) = a.mode {
                config.sweep.mode = m.into();
            }
            if a.restart {
                config.sweep.restart = true;
            }
            if let Some(t) = a.translation_range {
                config.sweep.translation_range_mm = t;
            }
            if let Some(r) = a.rotation_range {
                config.sweep.rotation_range_deg = r;
            }
            cmds::cmd_sweep(a, &config, &cmdline)
        }
        Cmd::Demo(a) => cmds::cmd_demo(a, &config, &cmdline),
    }
}
