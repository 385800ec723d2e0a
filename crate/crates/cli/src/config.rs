//! Persistable run configurations. Every subcommand resolves its arguments
//! into one of these before any compute starts; the configuration is written
//! verbatim next to the outputs and can be replayed with `esglm rerun`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum RunConfig {
    Simulate(SimulateConfig),
    Fit(FitRunConfig),
    Evaluate(EvaluateConfig),
    Sweep(SweepConfig),
    Gradcheck(GradcheckRunConfig),
    BaselinePcr(BaselinePcrConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub preset: String,
    pub n: usize,
    /// Covariate dimension; `None` applies `p = floor(n^{4/3})`.
    pub p: Option<usize>,
    pub test_n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArgs {
    pub family: String,
    pub link: String,
    pub k: Option<usize>,
    pub evr: f64,
    pub radius: Option<f64>,
    pub eta: f64,
    pub xi: f64,
    pub lr: f64,
    pub iters: usize,
    pub tol: f64,
    pub mc: usize,
    pub factor: Option<String>,
    pub minibatch: Option<usize>,
    pub swap_average: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitRunConfig {
    pub train: PathBuf,
    pub format: String,
    pub labels: Option<PathBuf>,
    pub model: ModelArgs,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub test: PathBuf,
    pub format: String,
    pub labels: Option<PathBuf>,
    pub m: usize,
    pub level: f64,
    pub threshold: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub preset: String,
    pub grid: Vec<usize>,
    pub reps: usize,
    pub test_n: usize,
    pub methods: Vec<String>,
    pub jobs: Option<usize>,
    pub model: ModelArgs,
    pub m: usize,
    pub level: f64,
    pub threshold: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckRunConfig {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub corrupt: bool,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselinePcrConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub format: String,
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub family: String,
    pub folds: usize,
    pub grid_max: usize,
    pub seed: u64,
    pub out: PathBuf,
}
