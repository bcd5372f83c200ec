//! `liouville`: run a named analysis pipeline from a JSON configuration and
//! write machine-readable reports.
//!
//! Exit status: 0 when every declared tolerance holds, 2 on a validation
//! failure (the first failing check is named on stderr), 1 on I/O or
//! configuration errors.

mod config;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use liouville::Error;
use serde_json::json;

use config::{ConfigError, Pipeline, PipelineConfig};

#[derive(Parser, Debug)]
#[command(
    name = "liouville",
    version,
    about = "Integrable-structure pipelines on T*T^n"
)]
struct Args {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    /// analyze, rotation, conjugacy, coords, approx or c0check; overrides the config.
    #[arg(long)]
    pipeline: Option<String>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

/// Errors that are problems with the input rather than failed checks.
fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::BadGrid(_)
            | Error::FileFormat(_)
            | Error::Io(_)
            | Error::SyntaxError { .. }
            | Error::UnknownIdentifier { .. }
            | Error::BadParameters(_)
            | Error::DimensionMismatch(_)
            | Error::NotSeparable(_)
    )
}

fn config_failure(e: ConfigError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match PipelineConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return config_failure(e),
    };
    let pipeline = match (&args.pipeline, cfg.pipeline) {
        (Some(name), _) => match Pipeline::parse(name) {
            Some(p) => p,
            None => {
                return config_failure(ConfigError::Invalid(format!("unknown pipeline `{name}`")))
            }
        },
        (None, Some(p)) => p,
        (None, None) => return config_failure(ConfigError::Invalid("no pipeline given".into())),
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("liouville-out"));
    if let Err(e) = cfg.validate(pipeline) {
        return config_failure(e);
    }
    if let Some(t) = args.threads {
        if t == 0 {
            return config_failure(ConfigError::Invalid("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            return config_failure(ConfigError::Invalid(e.to_string()));
        }
    }

    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let report = match pipeline::run(&cfg, pipeline) {
        Ok(r) => r,
        Err(e) if is_config_error(&e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("validation failed: {e}");
            return ExitCode::from(2);
        }
    };
    let metadata = json!({
        "pipeline": pipeline.name(),
        "config": args.config.display().to_string(),
        "started_unix": started,
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let Err(e) = report
        .write(&out, pipeline.name())
        .and_then(|_| write_metadata(&out, &metadata))
    {
        eprintln!("I/O error: {e}");
        return ExitCode::from(1);
    }
    match report.first_failure() {
        Some(c) => {
            eprintln!(
                "validation failed: {} = {:e} exceeds {:e}",
                c.name, c.value, c.tolerance
            );
            ExitCode::from(2)
        }
        None => ExitCode::SUCCESS,
    }
}

fn write_metadata(dir: &Path, metadata: &serde_json::Value) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(metadata).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("metadata.json"), text + "\n")
}
