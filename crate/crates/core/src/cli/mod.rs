//! The `tm-diffuse` command line: configuration, subcommands and report files.

mod commands;
mod config;
mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_complete, cmd_eval, cmd_gen, cmd_ingest, cmd_synth, cmd_tomo, cmd_train, CompleteOutcome, Dataset,
    GenOutcome, IngestOutcome, SynthOutcome, TomoOutcome, TrainOutcome, CHECKPOINT_FILE, LOSS_FILE, MANIFEST_FILE,
};
pub use config::{read_config_file, DataLayout, EvalScope, RunConfig, DATA_DIR_ENV};
pub use plot::line_chart_svg;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "tm-diffuse", version, about = "Diffusion models for traffic-matrix completion, tomography and synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` file, or a run manifest to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root for relative paths (default: $TM_DIFFUSE_DATA_DIR, then `.`).
    #[arg(long, global = true)]
    pub data_dir: Option<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for sampling.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Denoiser evaluations per sampling trajectory.
    #[arg(long, global = true)]
    pub steps: Option<usize>,

    /// Reverse-step jump size.
    #[arg(long, global = true)]
    pub stride: Option<usize>,

    /// Guidance step size; 0 switches guidance off.
    #[arg(long, global = true)]
    pub rho: Option<f64>,

    /// Derive link loads from the ground truth.
    #[arg(long, global = true)]
    pub simulate: bool,

    /// Any config key, e.g. `--set epochs_diff=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic traffic trace with its topology and routing matrix.
    Gen,
    /// Split, normalize and mask a traffic trace.
    Ingest,
    /// Train the imputation autoencoder and the diffusion denoiser.
    Train,
    /// Draw unconditional traffic windows.
    Synth,
    /// Estimate flows from link loads.
    Tomo,
    /// Fill in unobserved flows.
    Complete,
    /// Score an estimate against ground truth.
    Eval,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl Cli {
    /// Flags in precedence order (later wins).
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.overrides.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("data_dir", self.data_dir.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("jobs", self.jobs.map(|v| v.to_string()));
        push("sample_steps", self.steps.map(|v| v.to_string()));
        push("stride", self.stride.map(|v| v.to_string()));
        push("rho", self.rho.map(|v| v.to_string()));
        push("simulate", self.simulate.then(|| "true".to_string()));
        out
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), std::env::var(DATA_DIR_ENV).ok(), &self.overrides())
    }
}

/// Runs one subcommand and prints a short summary on stdout.
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Gen => {
            let o = cmd_gen(cfg)?;
            println!("wrote {} flows and {} links to {}", o.flows, o.links, o.dir.display());
        }
        Command::Ingest => {
            let o = cmd_ingest(cfg)?;
            println!(
                "wrote {} flows, {} train and {} test slots to {}",
                o.dataset.train.flow_count(),
                o.dataset.train.time_count(),
                o.dataset.test.time_count(),
                o.dir.display()
            );
        }
        Command::Train => {
            let o = cmd_train(cfg)?;
            println!("trained {} epochs; checkpoint {}", o.epochs, o.checkpoint.display());
        }
        Command::Synth => {
            let o = cmd_synth(cfg)?;
            let mmd = o.mmd2.map_or("NA".to_string(), |v| v.to_string());
            println!("wrote {} windows to {}; mmd2={mmd}", o.windows.len(), o.dir.display());
        }
        Command::Tomo => {
            let o = cmd_tomo(cfg)?;
            print!("link_residual={}\n{}", o.link_residual, o.report.map(|r| r.to_key_values()).unwrap_or_default());
        }
        Command::Complete => {
            let o = cmd_complete(cfg)?;
            let base = o.baseline.nmae.map_or("NA".to_string(), |v| v.to_string());
            print!("{}baseline_nmae={base}\n", o.report.to_key_values());
        }
        Command::Eval => print!("{}", cmd_eval(cfg)?.to_key_values()),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on a numeric failure, 2 on invalid input or I/O errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.resolve().and_then(|cfg| run(cli.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
