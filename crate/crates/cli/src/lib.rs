//! Command-line front end: argument parsing, config loading and the exit
//! protocol.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid configuration, 4 data or I/O
//! problems, 5 numeric failures. Diagnostics go to stderr; progress lines
//! go to stdout. No input artifact is ever modified.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppcreg_core::Error;

pub mod artifacts;
pub mod commands;
pub mod config;

use config::RunConfig;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

/// Version line shown by `--version`: crate version plus every on-disk
/// format version, so artifact compatibility is checkable at a glance.
fn version_line() -> &'static str {
    static LINE: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    LINE.get_or_init(|| {
        format!(
            "{} (scene schema {}, starts schema {}, corpus format {}, results schema {}, \
             model format {})",
            env!("CARGO_PKG_VERSION"),
            artifacts::SCENE_SCHEMA_VERSION,
            artifacts::STARTS_SCHEMA_VERSION,
            artifacts::CORPUS_FORMAT_VERSION,
            artifacts::RESULTS_SCHEMA_VERSION,
            ppcreg_core::MODEL_VERSION,
        )
    })
}

/// A failed run, carrying its exit code and diagnostics.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(Vec<String>),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn report(&self) {
        match self {
            CliError::Usage(msg) => eprintln!("usage error: {msg}"),
            CliError::Config(diags) => {
                eprintln!("invalid configuration:");
                for d in diags {
                    eprintln!("  {d}");
                }
            }
            CliError::Data(msg) => eprintln!("data error: {msg}"),
            CliError::Numeric(msg) => eprintln!("numeric error: {msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::UnknownVariant(_) => CliError::Usage(format!(
                "{e}; valid variants: {}",
                ppcreg_core::VARIANT_NAMES.join(", ")
            )),
            Error::DegenerateProjection { .. }
            | Error::SingularSystem { .. }
            | Error::NonFinitePose
            | Error::DivergedTraining { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ppcreg",
    version = version_line(),
    about = "Synthetic single-view rigid registration experiments",
    propagate_version = true
)]
struct Cli {
    /// TOML run configuration; omitted sections use documented defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, camera and ground-truth poses.
    GenScenes(GenScenesArgs),
    /// Sample binned start poses for every scene.
    GenStarts(GenStartsArgs),
    /// Precompute a correspondence training corpus.
    PrecomputeCorr(PrecomputeArgs),
    /// Train per-level weighting models on a corpus.
    Train(TrainArgs),
    /// Register every (scene, start pose) case under one variant.
    Register(RegisterArgs),
    /// Aggregate a results table into per-variant metrics.
    Evaluate(EvaluateArgs),
    /// Emit the full report bundle (metrics, histograms, convergence).
    Report(EvaluateArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    /// Output scene file (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of scenes, overriding the config file.
    #[arg(long)]
    count: Option<usize>,
    /// Surface points per phantom, overriding the config file.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args)]
struct GenStartsArgs {
    /// Scene file produced by gen-scenes.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Output start-pose file (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Start poses per scene, overriding the config file.
    #[arg(long)]
    count: Option<usize>,
    /// Largest initial error in millimetres, overriding the config file.
    #[arg(long)]
    max_mtre: Option<f64>,
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Scene file produced by gen-scenes.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Output corpus file (binary).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training start poses per scene, overriding the config file.
    #[arg(long)]
    starts_per_scene: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file produced by precompute-corr.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Directory the level<i>.wnet model files are written to.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Train only this resolution level.
    #[arg(long)]
    level: Option<u32>,
    /// Training epochs, overriding the config file.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Scene file produced by gen-scenes.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Start-pose file produced by gen-starts.
    #[arg(long, value_name = "FILE")]
    starts: PathBuf,
    /// Directory holding level<i>.wnet files (learned-weight variants).
    #[arg(long, value_name = "DIR")]
    models: Option<PathBuf>,
    /// Method variant, overriding the config file.
    #[arg(long)]
    variant: Option<String>,
    /// Worker threads (0 = all cores), overriding the config file.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output results table (CSV).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Results CSV produced by register.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output report directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Capture-range bin width in millimetres, overriding the config file.
    #[arg(long)]
    bin_width: Option<f64>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(vec![format!("{}: {e}", p.display())])
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Applies flag overrides, then validates the merged config.
fn finalize(mut cfg: RunConfig, tweak: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    tweak(&mut cfg);
    let diagnostics = config::validate_config(&cfg);
    if diagnostics.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(diagnostics))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenScenes(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(count) = args.count {
                    c.scenes.count = count;
                }
                if let Some(points) = args.points {
                    c.scenes.points = points;
                }
            })?;
            commands::gen_scenes(&cfg, &args.out)?;
        }
        Command::GenStarts(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(count) = args.count {
                    c.starts.count = count;
                }
                if let Some(max) = args.max_mtre {
                    c.starts.max_mtre_mm = max;
                }
            })?;
            commands::gen_starts(&cfg, &args.scenes, &args.out)?;
        }
        Command::PrecomputeCorr(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(n) = args.starts_per_scene {
                    c.corpus.starts_per_scene = n;
                }
            })?;
            commands::precompute_corr(&cfg, &args.scenes, &args.out)?;
        }
        Command::Train(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(epochs) = args.epochs {
                    c.train.epochs = epochs;
                }
            })?;
            commands::train(&cfg, &args.corpus, &args.out, args.level)?;
        }
        Command::Register(args) => {
            // A variant passed on the command line is a usage concern, not
            // a config-file one: reject it before config validation so the
            // caller gets the usage exit code and the list of valid names.
            if let Some(name) = &args.variant {
                ppcreg_core::variant_config(name).map_err(CliError::from)?;
            }
            let cfg = finalize(cfg, |c| {
                if let Some(variant) = args.variant {
                    c.register.variant = variant;
                }
                if let Some(jobs) = args.jobs {
                    c.register.jobs = jobs;
                }
            })?;
            commands::register(
                &cfg,
                &args.scenes,
                &args.starts,
                args.models.as_deref(),
                &args.out,
            )?;
        }
        Command::Evaluate(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(w) = args.bin_width {
                    c.evaluate.bin_width_mm = w;
                }
            })?;
            commands::evaluate(&cfg, &args.input, &args.out)?;
        }
        Command::Report(args) => {
            let cfg = finalize(cfg, |c| {
                if let Some(w) = args.bin_width {
                    c.evaluate.bin_width_mm = w;
                }
            })?;
            commands::report(&cfg, &args.input, &args.out)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs the requested command and converts the outcome
/// into the documented exit protocol. Never panics on bad input: any
/// escaped panic is reported as an internal error.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are successful "errors" in clap.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli)));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            err.report();
            ExitCode::from(err.exit_code())
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("internal error: {what}");
            ExitCode::FAILURE
        }
    }
}
