//! Command-line driver for the artipoint pipeline and the HTTP render
//! service used by the pose editor.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "artipoint", version, about = "Articulated point-cloud reconstruction and reposing")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-view dataset from a rig description
    GenData(GenDataArgs),
    /// Build the initial model (cloud, skeleton, weights) from a dataset
    Extract(ExtractArgs),
    /// Optimize a model against a dataset
    Train(TrainArgs),
    /// Render one dataset camera at a normalized time
    Render(RenderArgs),
    /// Print per-view PSNR as JSON
    Evaluate(EvaluateArgs),
    /// Merge and prune bones that barely move
    Simplify(SimplifyArgs),
    /// Render one dataset camera at a user pose
    Repose(ReposeArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Rig JSON file
    #[arg(long)]
    pub rig: PathBuf,
    /// Training views on the camera ring
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub views: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub timestamps: u32,
    /// Image size as WIDTHxHEIGHT
    #[arg(long, value_parser = parse_resolution)]
    pub res: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Canonical density grid; defaults to DATASET/gt/density.bin
    #[arg(long)]
    pub density: Option<PathBuf>,
    /// JSON with initialization settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; missing fields take the desk defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines metric history; defaults to OUT with a .history.jsonl suffix
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub camera: usize,
    /// Normalized time in [0, 1]
    #[arg(long, value_parser = parse_unit_time)]
    pub time: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluate the training views instead of the held-out ones
    #[arg(long)]
    pub train_views: bool,
}

#[derive(Debug, Args)]
pub struct SimplifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = parse_threshold)]
    pub threshold_deg: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Pose JSON file
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub camera: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Reload the checkpoint when the file changes
    #[arg(long)]
    pub reload: bool,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 || w > 4096 || h > 4096 {
        return Err(format!("resolution {s} out of range 1..=4096"));
    }
    Ok((w, h))
}

fn parse_unit_time(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(format!("time {t} outside [0, 1]"));
    }
    Ok(t)
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if !(0.0..=180.0).contains(&t) {
        return Err(format!("threshold {t} outside [0, 180] degrees"));
    }
    Ok(t)
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<artipoint::Error> for CliError {
    fn from(e: artipoint::Error) -> Self {
        match e {
            artipoint::Error::NonFinite(_) | artipoint::Error::Autodiff(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}
