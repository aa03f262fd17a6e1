//! Command-line front end for vasosim.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Overrides, ProviderKind, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vasosim", version, about = "Vascular flow, echo inversion and occlusion risk")]
pub struct Cli {
    /// TOML config file. Falls back to $VASOSIM_CONFIG, then defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Registered inversion solver.
    #[arg(long, global = true)]
    pub solver: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Likelihood service URL for the llm provider.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Regularization weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Provider request timeout in seconds.
    #[arg(long, global = true)]
    pub timeout: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Run the flow solver and write the radius field.
    Simulate,
    /// Synthesize an echo from a radii CSV (--input).
    Echo,
    /// Recover radii from an echo CSV (--input).
    Invert,
    /// Score a report or solution JSON (--input) and raise alerts.
    Assess,
    /// Generate a labeled synthetic dataset.
    GenData,
    /// Generate, invert, assess and alert for every scenario session.
    Pipeline,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            input: self.input.clone(),
            solver: self.solver.clone(),
            provider: self.provider,
            endpoint: self.endpoint.clone(),
            lambda: self.lambda,
            max_iter: self.max_iter,
            timeout: self.timeout,
        }
    }
}

/// Runs one invocation and returns the line to print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.apply(cli.overrides());
    let settings = config.resolve()?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let input = config.input.as_deref();
    Ok(match cli.command {
        Command::Simulate => {
            let s = commands::simulate(&settings, &out)?;
            format!("radius range [{:e}, {:e}] m, volume drift {:e}", s.min_radius, s.max_radius, s.volume_drift)
        }
        Command::Echo => {
            let t = commands::echo(&settings, input, &out)?;
            format!("{} samples at {} Hz", t.samples.len(), t.fs)
        }
        Command::Invert => {
            let s = commands::invert(&settings, input, &out)?;
            format!("converged in {} iterations, residual {:e}", s.iterations, s.residual_norm)
        }
        Command::Assess => {
            let a = commands::assess(&settings, input, &out)?;
            format!(
                "prob_now {:.4}, tte step {} (p = {:.4}), severity {:?}",
                a.likelihood.prob_now, a.tte.tte_step, a.tte.max_prob, a.severity
            )
        }
        Command::GenData => {
            let d = commands::gen_data(&settings, &out)?;
            format!("{} sessions written to {}", d.sessions.len(), out.display())
        }
        Command::Pipeline => {
            let r = commands::pipeline(&settings, &out)?;
            let alerts = r.sessions.iter().filter(|s| s.alerted).count();
            format!("{} sessions processed, {} alerts", r.sessions.len(), alerts)
        }
    })
}
