//! Command-line front end for the normalization laboratory.
//!
//! Exit codes: 0 success, 1 configuration or input problem, 2 training
//! diverged, 3 gradient check failed.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use normlab_core::gradcheck::{self, Scope};
use normlab_core::train::RunStatus;
use normlab_core::Result;

use normlab::config::ExperimentConfig;
use normlab::{pipeline, report, transfer};

#[derive(Parser)]
#[command(name = "normlab", version, about = "Normalization-layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config and write run artifacts.
    Train {
        /// Experiment config (TOML).
        #[arg(long, required_unless_present = "print_defaults")]
        config: Option<PathBuf>,
        /// Override the training seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the inference choice (cn or cn+).
        #[arg(long)]
        inference: Option<String>,
        /// Print the built-in defaults as a config file and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Which suite to run: op, layer, or model.
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a Gaussian mixture to the configured dataset's sample vectors.
    FitGmm {
        #[arg(long)]
        config: PathBuf,
        /// Component count.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gmm-out")]
        out: PathBuf,
    },
    /// Re-render an image from one context as another using a checkpoint's
    /// context table.
    StyleTransfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG or raw tensor file.
        #[arg(long)]
        input: PathBuf,
        /// Source context id.
        #[arg(long)]
        from: usize,
        /// Target context id.
        #[arg(long)]
        to: usize,
        /// Output path; `.png` quantizes, anything else stays lossless.
        #[arg(long)]
        out: PathBuf,
        /// Variance offset the moments were learned with.
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Merge run directories into comparison tables and an SVG chart.
    Report {
        /// Run directories, each holding a metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report-out")]
        out: PathBuf,
        /// Training-accuracy level for the epochs-to-threshold table.
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
    },
    /// Evaluate a checkpoint on one split of the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Override the inference choice (cn or cn+).
        #[arg(long)]
        inference: Option<String>,
        /// Also write the verdict JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(run(Cli::parse()));
}

fn run(cli: Cli) -> i32 {
    if let Ok(v) = std::env::var("NORMLAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = normlab_core::cap_threads(n) {
                    eprintln!("warning: {e}");
                }
            }
            _ => {
                eprintln!("error: NORMLAB_THREADS must be a positive integer, got '{v}'");
                return 1;
            }
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, seed, out, inference, print_defaults } => {
            if print_defaults {
                print!("{}", ExperimentConfig::default().to_toml_string()?);
                return Ok(0);
            }
            let mut cfg = ExperimentConfig::load(&config.expect("enforced by clap"))?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o.display().to_string();
            }
            if let Some(i) = inference {
                cfg.train.inference = i;
            }
            cfg.validate()?;
            let outcome = pipeline::cmd_train(&cfg)?;
            Ok(if matches!(outcome.status, RunStatus::Diverged { .. }) { 2 } else { 0 })
        }
        Command::Gradcheck { scope, seed } => {
            let scope: Scope = scope.parse()?;
            let report = gradcheck::run(scope, seed)?;
            println!("{}", report.render());
            Ok(if report.passed() { 0 } else { 3 })
        }
        Command::FitGmm { config, k, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            pipeline::cmd_fit_gmm(&cfg, k, seed, &out)?;
            Ok(0)
        }
        Command::StyleTransfer { checkpoint, input, from, to, out, epsilon } => {
            transfer::cmd_style_transfer(&checkpoint, &input, from, to, &out, epsilon)?;
            Ok(0)
        }
        Command::Report { runs, out, threshold } => {
            report::cmd_report(&runs, &out, threshold)?;
            Ok(0)
        }
        Command::Eval { config, checkpoint, split, inference, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(i) = inference {
                cfg.train.inference = i;
            }
            cfg.validate()?;
            pipeline::cmd_eval(&cfg, &checkpoint, &split, out.as_deref())?;
            Ok(0)
        }
    }
}
