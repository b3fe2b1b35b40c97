//! `treeprobe`: validate question trees, run classification batches against
//! a backend, and analyse the resulting transcripts.
//!
//! Exit status: 0 on success, 1 when a tree or metric check fails, 2 on
//! usage, configuration or I/O errors.

mod backend;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::config::{Layer, Settings};

#[derive(Debug, Parser)]
#[command(name = "treeprobe", version, about = "Decision-tree vs zero-shot classification harness")]
struct Cli {
    /// Seed for sampling, simulation and Monte Carlo.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for the response cache; caching is off without it.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Upper bound on concurrent backend requests.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Primary output file of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML config file (default: $TREEPROBE_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("TREEPROBE_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let flags = Layer {
        seed: cli.seed,
        cache_dir: cli.cache_dir.clone(),
        parallelism: cli.parallelism,
        ..Layer::default()
    };
    let settings = match Settings::resolve(flags, cli.config.as_deref(), |k| std::env::var(k).ok()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli.command, &settings, cli.out.as_deref()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

