//! The `rigfit` command line and HTTP service.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rigfit_core::Error;

pub mod commands;
pub mod service;

/// Input or configuration problem.
pub const EXIT_CONFIG: u8 = 2;
/// The numerics failed; a report stub was written.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

/// Whether a core error comes from the numerics rather than the inputs.
pub fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::BehindCamera { .. }
            | Error::Degenerate(_)
            | Error::NoConsensus(_)
            | Error::UnderConstrained { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. }
    )
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rigfit", version, about = "Fit a kinematic body rig to 2D keypoints")]
pub struct Cli {
    /// Log level for stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene bundle.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the procedural rig.
        #[arg(long, default_value_t = 0)]
        rig_seed: u64,
        #[arg(long, default_value_t = 4)]
        cameras: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of keypoints replaced by uniform outliers.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Fraction of keypoints marked invisible.
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one view of one frame.
    FitSingle {
        #[arg(long)]
        rig: PathBuf,
        /// Frame observation file.
        #[arg(long)]
        obs: PathBuf,
        /// Camera set file.
        #[arg(long)]
        camera: PathBuf,
        /// Index into the frame's views and the camera set.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pose mixture prior.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Ground truth to score the fit against.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Fit a multi-view sequence bundle.
    FitMulti {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Fit report, parameter file or ground-truth file.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Defaults to rig.json next to the ground truth.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Defaults to cameras.json next to the ground truth, if present.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Comma-separated subset of mpjpe, pa-mpjpe, pve, pck, fscore.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Session journal and extra rigs live here.
        #[arg(long)]
        data_dir: PathBuf,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
        /// Static files (the annotation client) served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Write the JSON Schemas of every file and request body.
    Schemas {
        #[arg(long, default_value = "docs/schemas")]
        out: PathBuf,
    },
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            seed,
            rig_seed,
            cameras,
            frames,
            noise,
            outliers,
            occlusion,
            out,
        } => commands::synth(&commands::SynthArgs {
            seed,
            rig_seed,
            cameras,
            frames,
            noise,
            outliers,
            occlusion,
            out,
        }),
        Command::FitSingle {
            rig,
            obs,
            camera,
            view,
            init,
            config,
            prior,
            gt,
            out,
        } => commands::fit_single(&commands::FitSingleArgs {
            rig,
            obs,
            camera,
            view,
            init,
            config,
            prior,
            gt,
            out,
        }),
        Command::FitMulti {
            scene,
            config,
            prior,
            out,
        } => commands::fit_multi(&commands::FitMultiArgs {
            scene,
            config,
            prior,
            out,
        }),
        Command::Eval {
            pred,
            gt,
            rig,
            cameras,
            metrics,
            categories,
            out,
        } => commands::eval(&commands::EvalArgs {
            pred,
            gt,
            rig,
            cameras,
            metrics,
            categories,
            out,
        }),
        Command::Serve {
            port,
            host,
            data_dir,
            cors_origin,
            static_dir,
        } => {
            let opts = service::ServeOptions {
                data_dir,
                cors_origin,
                static_dir,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(e.to_string()))?;
            rt.block_on(service::serve(&host, port, opts))
        }
        Command::Schemas { out } => {
            for p in commands::schemas(&out)? {
                log::info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses the arguments, runs the command and maps failures to exit codes.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
