//! The `cbsn` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed
//! verification or violated invariant, 3 I/O or file-format error.

pub mod commands;
pub mod config;
pub mod raster;
pub mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::error::Error;
use verify::Level;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 1,
                Error::NonFinite(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cbsn", version, about = "Conditional blind-spot network denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic clean/noisy raster pairs and a manifest.
    MakeNoise {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the noisy images of a generated dataset, minus the holdout.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `run.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the last checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Denoise one `.cbr` raster or 8-bit PNG.
    Denoise {
        /// Model file or run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Copy the input through without running the network.
        #[arg(long)]
        pass_through: bool,
    },
    /// Run the built-in self-checks.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: Level,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_mask: bool,
    },
    /// Score noisy and denoised images against clean references.
    Eval {
        /// Model file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// Period of the checkerboard score.
        #[arg(long, default_value_t = 2)]
        period: usize,
        /// Also print per-image rows.
        #[arg(long)]
        table: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::MakeNoise { config, seed, out: dir } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(d) = dir {
                cfg.data.dir = d;
            }
            commands::make_noise(&cfg, out)
        }
        Command::Train {
            config,
            seed,
            out: dir,
            resume,
        } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(d) = dir {
                cfg.run_dir = d;
            }
            commands::train(&cfg, resume, out)
        }
        Command::Denoise {
            checkpoint,
            input,
            out: output,
            pass_through,
        } => commands::denoise_file(checkpoint.as_deref(), &input, &output, pass_through),
        Command::Verify {
            level,
            seed,
            corrupt_mask,
        } => commands::verify(level, &verify::Options { seed, corrupt_mask }, out),
        Command::Eval {
            checkpoint,
            clean,
            noisy,
            period,
            table,
            out: path,
        } => {
            let (n, d) = commands::evaluate(&checkpoint, &clean, &noisy, period)?;
            match path {
                Some(p) => {
                    let mut buf = Vec::new();
                    commands::print_eval(&n, &d, table, &mut buf).map_err(Error::from)?;
                    std::fs::write(p, buf).map_err(Error::from)?;
                }
                None => commands::print_eval(&n, &d, table, out).map_err(Error::from)?,
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
