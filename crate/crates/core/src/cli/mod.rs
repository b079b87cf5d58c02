//! The `obbkit` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
//! input), 3 numeric failure.

pub mod config;
pub mod dota;
pub mod maps;

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::synthetic_scene;
use config::{ConfigError, RunConfig};
use dota::UnknownCategory;

/// Environment variable giving the default worker-thread count.
pub const THREADS_ENV: &str = "OBBKIT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<dota::DotaError> for CliError {
    fn from(e: dota::DotaError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<maps::MapError> for CliError {
    fn from(e: maps::MapError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::evaluation::EvalError> for CliError {
    fn from(e: crate::evaluation::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::targets::TargetError> for CliError {
    fn from(e: crate::targets::TargetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::inference::InferenceError> for CliError {
    fn from(e: crate::inference::InferenceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::losses::LossError> for CliError {
    fn from(e: crate::losses::LossError) -> Self {
        use crate::losses::LossError::*;
        match e {
            Diverged { .. } | NonFiniteScore(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "obbkit",
    version,
    about = "Oriented-box geometry, targets, losses and evaluation"
)]
pub struct Cli {
    /// Worker threads (default: $OBBKIT_THREADS, else one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set alpha=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for randomized demos.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub classes: ClassArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ClassArgs {
    /// Comma-separated class names (default: the 15 DOTA categories).
    #[arg(long, global = true)]
    pub classes: Option<String>,
    /// Handling of categories missing from the class table.
    #[arg(long, value_enum, default_value_t = UnknownCategory::Error, global = true)]
    pub unknown_category: UnknownCategory,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact IoU of two quadrilaterals.
    Iou {
        /// Eight coordinates `x1,y1,…,x4,y4` (commas or spaces).
        #[arg(long, allow_hyphen_values = true)]
        quad_a: String,
        #[arg(long, allow_hyphen_values = true)]
        quad_b: String,
        /// Also rasterize both quads and report the difference.
        #[arg(long)]
        raster_check: bool,
        /// Raster resolution per axis.
        #[arg(long, default_value_t = 1000)]
        grid: usize,
    },
    /// Quads (first 8 numbers of each line) to `xmin ymin xmax ymax w h`.
    Encode { file: PathBuf },
    /// `xmin ymin xmax ymax w h` lines back to quads.
    Decode { file: PathBuf },
    /// Training targets for every annotated image.
    Assign {
        #[arg(long)]
        gt: PathBuf,
        /// Image size `WxH` (default: smallest size containing every object).
        #[arg(long)]
        image_size: Option<String>,
        /// Pyramid strides, e.g. `8,16,32,64,128`.
        #[arg(long)]
        strides: Option<String>,
        /// Level boundaries, e.g. `64,128,256,512`.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        center_radius: Option<f64>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Composite loss of a prediction map against a target map.
    Loss {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Image to use when the target file holds several.
        #[arg(long)]
        image: Option<String>,
        /// Compare the analytic gradient with central differences.
        #[arg(long)]
        grad_check: bool,
        /// Number of prediction entries checked.
        #[arg(long, default_value_t = 64)]
        grad_samples: usize,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Rotated NMS over per-class result files.
    Nms {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of result files against annotations.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// `07`/`11point` or `all`/`allpoint`.
        #[arg(long)]
        mode: Option<String>,
        /// Write the JSON report here (`-` for stdout instead of the table).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Gradient descent of free predictions onto one image's targets.
    FitDemo {
        /// Annotations (default: a synthetic three-object scene from the seed).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        image_size: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Print the loss every this many steps.
        #[arg(long, default_value_t = 100)]
        trace_every: usize,
    },
}

fn usage(e: ConfigError) -> CliError {
    CliError::Usage(e.to_string())
}

/// Defaults, then the config file, then `--set` and dedicated flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let entries = RunConfig::load(path).map_err(|e| CliError::Data(e.to_string()))?;
        cfg.apply(&entries)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", &t.to_string()).map_err(usage)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Assign {
            strides,
            levels,
            center_radius,
            ..
        } => {
            if let Some(s) = strides {
                cfg.set("strides", s).map_err(usage)?;
            }
            if let Some(l) = levels {
                cfg.set("level_ranges", l).map_err(usage)?;
            }
            if let Some(r) = center_radius {
                cfg.set("center_radius_mult", &r.to_string())
                    .map_err(usage)?;
            }
        }
        Command::Nms { iou: Some(t), .. } => cfg
            .set("nms_iou_threshold", &t.to_string())
            .map_err(usage)?,
        Command::Eval { iou, mode, .. } => {
            if let Some(t) = iou {
                cfg.set("iou_threshold", &t.to_string()).map_err(usage)?;
            }
            if let Some(m) = mode {
                cfg.set("mode", m).map_err(usage)?;
            }
        }
        Command::FitDemo { steps, lr, .. } => {
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if let Some(r) = lr {
                cfg.set("lr", &r.to_string()).map_err(usage)?;
            }
        }
        _ => {}
    }
    cfg.check().map_err(usage)?;
    Ok(cfg)
}

fn thread_count(cfg: &RunConfig) -> Result<Option<usize>, CliError> {
    if cfg.threads.is_some() {
        return Ok(cfg.threads);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(&cfg)? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let text = pool.install(|| commands::dispatch(cli, &cfg))?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Data(format!("writing output: {e}")))
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
