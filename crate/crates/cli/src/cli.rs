//! Argument parsing and the command dispatcher behind the binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or image
//! decoding error, 3 engine failure.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use texture_reformer::{FusionKind, ScopeKind, StageSet, WeightStore32};

use crate::service::{self, AppState};
use crate::transfer::{transfer_png, ConfigOverrides, PngInputs, RunError};

#[derive(Debug, Parser)]
#[command(name = "texture-reformer", author, version, about)]
pub struct Cli {
    /// TFRW weight file
    #[arg(long, global = true, env = "TFR_WEIGHTS", value_name = "PATH")]
    pub weights: Option<PathBuf>,

    /// Serve the HTTP API on this address instead of running a command
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<SocketAddr>,

    /// Per-request time limit of the HTTP service
    #[arg(long, value_name = "SECS", default_value_t = 300)]
    pub timeout_secs: u64,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transfer the style of a source image onto a target semantic layout
    Transfer(TransferArgs),
    /// Write a weight file with random (untrained) parameters
    RandomWeights {
        /// Output path
        #[arg(long)]
        out: PathBuf,
        /// RNG seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Stylized source image (PNG)
    #[arg(long)]
    pub style: PathBuf,
    /// Semantic map of the source (PNG)
    #[arg(long)]
    pub style_sem: PathBuf,
    /// Semantic map of the target (PNG)
    #[arg(long)]
    pub target_sem: PathBuf,
    /// Output image (PNG)
    #[arg(long)]
    pub out: PathBuf,
    /// Semantic weight of the global stage
    #[arg(long, default_value_t = 50.0, value_parser = non_negative, allow_negative_numbers = true)]
    pub omega1: f32,
    /// Semantic weight of the local stage
    #[arg(long, default_value_t = 50.0, value_parser = non_negative, allow_negative_numbers = true)]
    pub omega2: f32,
    /// How semantic guidance is fused: concat, add or downsample
    #[arg(long, default_value_t = FusionKind::Concat)]
    pub fusion: FusionKind,
    /// Patch size of the local stage
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub patch_size: usize,
    /// Patch size of the global stage (derived from the input size by default)
    #[arg(long, value_parser = positive)]
    pub patch_size_global: Option<usize>,
    /// Patch stride of the local stage
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub stride: usize,
    /// Stages to run, e.g. "I,II,III", "1,3" or "none"
    #[arg(long, default_value_t = StageSet::ALL)]
    pub stages: StageSet,
    /// Feature blend of the global stage
    #[arg(long, default_value_t = 1.0, value_parser = unit_interval, allow_negative_numbers = true)]
    pub blend1: f32,
    /// Feature blend of the local stage
    #[arg(long, default_value_t = 1.0, value_parser = unit_interval, allow_negative_numbers = true)]
    pub blend2: f32,
    /// Enhancement statistics scope: global or per-label
    #[arg(long, default_value_t = ScopeKind::Global)]
    pub se_scope: ScopeKind,
    /// Also write the intermediates as <out>.t5.png … <out>.t2.png
    #[arg(long)]
    pub trace: bool,
}

impl TransferArgs {
    pub fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            omega1: Some(self.omega1),
            omega2: Some(self.omega2),
            fusion: Some(self.fusion),
            patch_size: Some(self.patch_size),
            patch_size_global: self.patch_size_global,
            stride: Some(self.stride),
            stages: Some(self.stages),
            blend1: Some(self.blend1),
            blend2: Some(self.blend2),
            se_scope: Some(self.se_scope),
        }
    }
}

fn non_negative(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite number ≥ 0, got {s}"))
    }
}

fn unit_interval(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {s}"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// `out.png` → `out.t5.png`.
pub fn trace_path(out: &Path, name: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{name}.png"))
}

fn load_weights(path: Option<&Path>) -> Result<WeightStore32, RunError> {
    let path = path.ok_or_else(|| RunError::Config("no weight file: pass --weights or set TFR_WEIGHTS".into()))?;
    WeightStore32::load(path).map_err(|e| RunError::Input(format!("weights: {e}")))
}

fn read(path: &Path) -> Result<Vec<u8>, RunError> {
    std::fs::read(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, bytes).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
}

fn run_transfer_command(args: &TransferArgs, weights: Option<&Path>) -> Result<(), RunError> {
    let overrides = args.overrides();
    overrides.to_config().map_err(|e| RunError::Config(e.to_string()))?;
    let weights = load_weights(weights)?;
    let (style, s_sem, t_sem) = (read(&args.style)?, read(&args.style_sem)?, read(&args.target_sem)?);
    let inputs = PngInputs {
        source_style: &style,
        source_sem: &s_sem,
        target_sem: &t_sem,
    };
    let out = transfer_png(inputs, &overrides, &weights, args.trace)?;
    write(&args.out, &out.image)?;
    for (name, png) in &out.trace {
        write(&trace_path(&args.out, name), png)?;
    }
    for (stage, secs) in &out.timings {
        println!("{stage}: {secs:.3} s");
    }
    println!("total: {:.3} s", out.total_seconds());
    Ok(())
}

fn run_serve(addr: SocketAddr, timeout: Duration, weights: Option<&Path>) -> Result<(), RunError> {
    let weights = load_weights(weights)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| RunError::Input(format!("runtime: {e}")))?;
    runtime
        .block_on(service::serve(addr, AppState::new(weights, timeout)))
        .map_err(|e| RunError::Input(format!("{addr}: {e}")))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let weights = cli.weights.as_deref();
    let result = match (&cli.command, cli.serve) {
        (Some(_), Some(_)) => Err(RunError::Config("--serve cannot be combined with a command".into())),
        (None, Some(addr)) => run_serve(addr, Duration::from_secs(cli.timeout_secs), weights),
        (Some(Command::Transfer(args)), None) => run_transfer_command(args, weights),
        (Some(Command::RandomWeights { out, seed }), None) => WeightStore32::random(*seed)
            .save(out)
            .map_err(|e| RunError::Input(e.to_string())),
        (None, None) => Err(RunError::Config("nothing to do: pass a command or --serve ADDR (see --help)".into())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
