//! `maod`: dataset generation, training, evaluation, benchmarking and the
//! closed-loop simulation behind one command.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal invariant violation.

/// `println!` that tolerates a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "maod", version, about = "Meta-dispatched multi-head object detection at desk scale")]
struct Cli {
    /// Seed for data generation, initialization, shuffling and simulation.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// TOML run configuration; missing sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<timestamp>-<config hash>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Meta,
    Rough,
    Fine,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldArg {
    /// Object 2 m ahead and 1 m to the left.
    Default,
    /// No object anywhere.
    Empty,
    /// Object placed from the seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Command {
    /// Generate a labelled synthetic data set.
    Gen {
        /// Samples per situation: none, far, close.
        #[arg(long, value_parser = parse_counts, default_value = "607,452,328")]
        counts: [usize; 3],
    },
    /// Pretrain and freeze the extractor, then train heads.
    Train {
        /// Data set directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = HeadArg::All)]
        head: HeadArg,
        /// Reuse this extractor checkpoint instead of pretraining.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Evaluate all heads on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the four checkpoints.
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        models: Option<PathBuf>,
        /// Score ground truth against itself instead of loading models.
        #[arg(long)]
        oracle: bool,
    },
    /// Time the shared pipeline against the unshared decomposition.
    Bench {
        #[arg(long)]
        models: PathBuf,
        /// Take frames from this data set's test split instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Run the closed-loop approach simulation.
    Sim {
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        models: Option<PathBuf>,
        /// Use the ground-truth detector.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = WorldArg::Default)]
        world: WorldArg,
    },
    /// Answer position requests on a local TCP port for one connection.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        models: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = WorldArg::Default)]
        world: WorldArg,
    },
    /// Re-run the command recorded in a manifest and compare its outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_counts(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated counts, got {s:?}"));
    };
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("bad count {v:?}: {e}"));
    Ok([n(a)?, n(b)?, n(c)?])
}

/// Marks a failure as a usage error (exit 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use maod_core::Error;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Invariant(_) | Error::Backward(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn default_out(config_hash: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    Path::new("runs").join(format!("{stamp}-{}", &config_hash[..8]))
}

/// Makes input paths absolute so a manifest can be replayed from elsewhere.
fn resolve_inputs(command: &mut Command) -> Result<()> {
    let fix = |p: &mut PathBuf| -> Result<()> {
        *p = p
            .canonicalize()
            .with_context(|| format!("input path {} is not accessible", p.display()))?;
        Ok(())
    };
    match command {
        Command::Gen { .. } | Command::Rerun { .. } => {}
        Command::Train { data, extractor, .. } => {
            fix(data)?;
            if let Some(e) = extractor {
                fix(e)?;
            }
        }
        Command::Eval { data, models, .. } => {
            fix(data)?;
            if let Some(m) = models {
                fix(m)?;
            }
        }
        Command::Bench { models, data, .. } => {
            fix(models)?;
            if let Some(d) = data {
                fix(d)?;
            }
        }
        Command::Sim { models, .. } | Command::Serve { models, .. } => {
            if let Some(m) = models {
                fix(m)?;
            }
        }
    }
    Ok(())
}

/// Runs one command into `out` and writes its manifest.
fn execute(command: &Command, seed: u64, config: &RunConfig, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    commands::run(command, seed, config, out)?;
    let manifest = Manifest {
        command: command.clone(),
        seed,
        config_hash: config.hash(),
        config: config.clone(),
        versions: Default::default(),
        outputs: manifest::digest_outputs(out)?,
    };
    manifest.write(out)?;
    Ok(manifest)
}

fn real_main(cli: Cli) -> Result<()> {
    if let Command::Rerun { manifest: path } = &cli.command {
        let recorded = Manifest::read(path)?;
        recorded.config.validate()?;
        let out = cli.out.unwrap_or_else(|| default_out(&recorded.config_hash));
        let fresh = execute(&recorded.command, recorded.seed, &recorded.config, &out)?;
        let diff = manifest::differences(&recorded.outputs, &fresh.outputs);
        if !diff.is_empty() {
            anyhow::bail!(maod_core::Error::Invariant(format!(
                "re-run differs from the manifest in {} file(s): {}",
                diff.len(),
                diff.join(", ")
            )));
        }
        say!(
            "reproduced {} output file(s) byte-for-byte in {}",
            fresh.outputs.len(),
            out.display()
        );
        return Ok(());
    }
    let config = RunConfig::load(cli.config.as_deref())?;
    let mut command = cli.command;
    resolve_inputs(&mut command)?;
    let out = cli.out.unwrap_or_else(|| default_out(&config.hash()));
    execute(&command, cli.seed, &config, &out)?;
    say!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
