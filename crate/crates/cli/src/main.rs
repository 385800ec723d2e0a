//! Batch front-end: simulate, fit, evaluate, sweep, gradcheck, and baseline
//! subcommands.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric failure,
//! 3 verification failure.

mod commands;
mod config;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esglm::error::Error;

use config::*;

#[derive(Parser)]
#[command(
    name = "esglm",
    version,
    about = "Bayesian overparameterized GLMs with an effective-spectral prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Response family: bernoulli | poisson | gaussian | gaussian-unknown.
    #[arg(long, default_value = "bernoulli")]
    family: String,
    /// Link function: logistic | softplus | identity | bexp.
    #[arg(long, default_value = "logistic")]
    link: String,
    /// Prior truncation level; omit to use the explained-variance target.
    #[arg(long)]
    k: Option<usize>,
    /// Explained-variance target used when --k is absent.
    #[arg(long, default_value_t = 0.95)]
    evr: f64,
    /// Prior truncation radius; omit for 10 sqrt(trace).
    #[arg(long)]
    radius: Option<f64>,
    /// Variance-prior mean (two-parameter model).
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Variance-prior shape (two-parameter model).
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Maximum optimization iterations.
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Convergence tolerance on the smoothed objective.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Monte Carlo samples per optimization step.
    #[arg(long, default_value_t = 1)]
    mc: usize,
    /// Covariance factor: dense | diag | lowrank (default: by dimension).
    #[arg(long)]
    factor: Option<String>,
    /// Likelihood minibatch size (default: full batch).
    #[arg(long)]
    minibatch: Option<usize>,
    /// Fit both split roles and average the estimators.
    #[arg(long, default_value_t = false)]
    swap_average: bool,
}

impl ModelFlags {
    fn into_args(self) -> ModelArgs {
        ModelArgs {
            family: self.family,
            link: self.link,
            k: self.k,
            evr: self.evr,
            radius: self.radius,
            eta: self.eta,
            xi: self.xi,
            lr: self.lr,
            iters: self.iters,
            tol: self.tol,
            mc: self.mc,
            factor: self.factor,
            minibatch: self.minibatch,
            swap_average: self.swap_average,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test CSVs from a simulation preset.
    Simulate {
        /// logistic-gaussian | logistic-laplace | softplus-gaussian | softplus-laplace.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        n: usize,
        /// Covariate dimension; default floor(n^{4/3}).
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ESGLM_OUT")]
        out: PathBuf,
    },
    /// Split, build the spectral prior, and fit by variational inference.
    Fit {
        #[arg(long)]
        train: PathBuf,
        /// csv | arcene.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Label file (arcene format).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ESGLM_OUT")]
        out: PathBuf,
    },
    /// Score a fitted model on a test set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Predictive Monte Carlo samples per test point.
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ESGLM_OUT")]
        out: PathBuf,
    },
    /// Simulate, fit, and evaluate over a grid of sample sizes.
    Sweep {
        #[arg(long)]
        preset: String,
        /// Sample sizes, e.g. --grid 50,100,200.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        /// Replications per grid point.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
        /// Methods to run: es,pcr.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["es".to_string(), "pcr".to_string()])]
        methods: Vec<String>,
        /// Worker pool size (default: logical cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ESGLM_OUT")]
        out: PathBuf,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Test hook: corrupt a gradient so the harness must report failure.
        #[arg(long, hide = true, default_value_t = false)]
        corrupt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline methods.
    Baseline {
        #[command(subcommand)]
        method: BaselineCommand,
    },
    /// Re-run a persisted run_config.json.
    Rerun {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Principal component regression with cross-validated component count.
    Pcr {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        train_labels: Option<PathBuf>,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        /// bernoulli | poisson | gaussian.
        #[arg(long, default_value = "bernoulli")]
        family: String,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Component grid is 1..=grid_max.
        #[arg(long, default_value_t = 30)]
        grid_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ESGLM_OUT")]
        out: PathBuf,
    },
}

fn to_run_config(command: Command) -> Result<RunConfig, Error> {
    Ok(match command {
        Command::Simulate {
            preset,
            n,
            p,
            test_n,
            seed,
            out,
        } => RunConfig::Simulate(SimulateConfig {
            preset,
            n,
            p,
            test_n,
            seed,
            out,
        }),
        Command::Fit {
            train,
            format,
            labels,
            model,
            seed,
            out,
        } => RunConfig::Fit(FitRunConfig {
            train,
            format,
            labels,
            model: model.into_args(),
            seed,
            out,
        }),
        Command::Evaluate {
            model,
            test,
            format,
            labels,
            m,
            level,
            threshold,
            seed,
            out,
        } => RunConfig::Evaluate(EvaluateConfig {
            model,
            test,
            format,
            labels,
            m,
            level,
            threshold,
            seed,
            out,
        }),
        Command::Sweep {
            preset,
            grid,
            reps,
            test_n,
            methods,
            jobs,
            model,
            m,
            level,
            threshold,
            seed,
            out,
        } => RunConfig::Sweep(SweepConfig {
            preset,
            grid,
            reps,
            test_n,
            methods,
            jobs,
            model: model.into_args(),
            m,
            level,
            threshold,
            seed,
            out,
        }),
        Command::Gradcheck {
            seed,
            instances,
            tolerance,
            corrupt,
            out,
        } => RunConfig::Gradcheck(GradcheckRunConfig {
            seed,
            instances,
            tolerance,
            corrupt,
            out,
        }),
        Command::Baseline {
            method:
                BaselineCommand::Pcr {
                    train,
                    test,
                    format,
                    train_labels,
                    test_labels,
                    family,
                    folds,
                    grid_max,
                    seed,
                    out,
                },
        } => RunConfig::BaselinePcr(BaselinePcrConfig {
            train,
            test,
            format,
            train_labels,
            test_labels,
            family,
            folds,
            grid_max,
            seed,
            out,
        }),
        Command::Rerun { config } => {
            let text = std::fs::read_to_string(&config)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: 0,
                msg: format!("run config does not parse: {e}"),
            })?
        }
    })
}

/// Dispatch; `Ok(true)` means success, `Ok(false)` a verification failure.
fn execute(config: RunConfig) -> Result<bool, Error> {
    match config {
        RunConfig::Simulate(c) => commands::run_simulate(&c).map(|()| true),
        RunConfig::Fit(c) => commands::run_fit(&c).map(|()| true),
        RunConfig::Evaluate(c) => commands::run_evaluate(&c).map(|()| true),
        RunConfig::Sweep(c) => sweep::run_sweep(&c).map(|()| true),
        RunConfig::Gradcheck(c) => commands::run_gradcheck(&c),
        RunConfig::BaselinePcr(c) => commands::run_baseline_pcr(&c).map(|()| true),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Divergence { .. } => 2,
        _ => 1,
    }
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
    match to_run_config(cli.command).and_then(execute) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
