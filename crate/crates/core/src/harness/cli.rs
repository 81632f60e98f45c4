//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::ExperimentConfig;
use super::report::SweepParam;
use super::{cmd_ablate, cmd_gen, cmd_noise, cmd_sweep, cmd_train_eval, validate_file};
use crate::classifier::Variant;
use crate::store::SynthParams;
use crate::Result;

#[derive(Debug, Parser)]
#[command(name = "simnl", version, about = "Positive/negative cache few-shot classification over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic task as four SNLE files.
    Gen(GenArgs),
    /// Train and evaluate once per seed.
    TrainEval(RunArgs),
    /// One row per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Label-flip fractions, each with reweighting on and off.
    Noise {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        fractions: Vec<f64>,
    },
    /// Variants full, T, V, P and N with shared seeds.
    Ablate(RunArgs),
    /// Check SNLE files (and optionally a config) without running anything.
    Validate {
        files: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    #[arg(long, default_value_t = 0.4)]
    pub spread: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl GenArgs {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            classes: self.classes,
            dim: self.dim,
            shots: self.shots,
            queries_per_class: self.queries,
            spread: self.spread,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

/// Config file plus per-field overrides. Precedence: flag, then
/// `SIMNL_SEED` (seed only), then the config file, then defaults.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Replaces the config's seeds list with this single seed.
    #[arg(long, env = "SIMNL_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum, ignore_case = true)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub noise_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub reweighting: Option<OnOff>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let h = &mut cfg.hyper;
        if let Some(v) = self.lambda {
            h.lambda = v;
        }
        if let Some(v) = self.tau {
            h.tau = v;
        }
        if let Some(v) = self.alpha {
            h.alpha = v;
        }
        if let Some(v) = self.beta {
            h.beta = v;
        }
        if let Some(v) = self.epochs {
            h.epochs = v;
        }
        if let Some(v) = self.reweighting {
            h.reweighting = v == OnOff::On;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(f) = self.noise_fraction {
            cfg.noise_fraction = f;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.csv.is_some() {
            cfg.csv = self.csv.clone();
        }
        Ok(cfg)
    }
}

/// Runs a parsed command. `Ok(false)` means the command completed but found
/// problems (validate only).
pub fn execute(cli: &Cli) -> Result<bool> {
    let report = match &cli.command {
        Command::Gen(args) => {
            for p in cmd_gen(&args.params(), &args.out)? {
                println!("{}", p.display());
            }
            return Ok(true);
        }
        Command::Validate { files, config } => {
            let mut ok = true;
            if let Some(p) = config {
                match ExperimentConfig::load(p).and_then(|c| c.check()) {
                    Ok(()) => println!("{}: ok", p.display()),
                    Err(e) => {
                        ok = false;
                        println!("{}: {e}", p.display());
                    }
                }
            }
            for f in files {
                let problems = validate_file(f);
                if problems.is_empty() {
                    println!("{}: ok", f.display());
                }
                for msg in &problems {
                    println!("{}: {msg}", f.display());
                }
                ok &= problems.is_empty();
            }
            return Ok(ok);
        }
        Command::TrainEval(run) => cmd_train_eval(&run.resolve()?)?,
        Command::Sweep { run, param, values } => cmd_sweep(&run.resolve()?, *param, values)?,
        Command::Noise { run, fractions } => cmd_noise(&run.resolve()?, fractions)?,
        Command::Ablate(run) => cmd_ablate(&run.resolve()?)?,
    };
    report.emit(report.config.out.as_deref(), report.config.csv.as_deref())?;
    Ok(true)
}
