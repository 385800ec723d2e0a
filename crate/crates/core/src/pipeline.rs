//! End-to-end fitting pipeline: split the data, build the spectral prior
//! from one half, run variational inference against the other half's
//! likelihood, and package everything needed for prediction into a
//! self-describing model container.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{split, Dataset};
use crate::error::{Error, Result};
use crate::eval::{interval, PredictiveSummary};
use crate::glm::{FamilyMember, GlmSpec};
use crate::prior::{standard_normal, SpectralPrior, VariancePrior};
use crate::spectral::{PartialSpectrum, DEFAULT_DENSE_THRESHOLD};
use crate::vi::{
    self, reparam_sample, CovFactor, FitConfig, FitResult, VarianceBlock, VariationalState,
};

pub const MODEL_FILE_VERSION: u32 = 1;

/// Prior hyperparameters resolved by the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Truncation level; `None` selects the smallest k reaching `evr`.
    pub k: Option<usize>,
    /// Explained-variance target used when `k` is absent.
    pub evr: f64,
    /// Truncation radius; `None` uses `10 sqrt(trace)`.
    pub radius: Option<f64>,
    /// Variance-prior mean (two-parameter model).
    pub eta: f64,
    /// Variance-prior shape (two-parameter model).
    pub xi: f64,
    /// Dimension above which the Gram decomposition path is used.
    pub dense_threshold: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            k: None,
            evr: 0.95,
            radius: None,
            eta: 1.0,
            xi: 1.0,
            dense_threshold: DEFAULT_DENSE_THRESHOLD,
        }
    }
}

/// Full pipeline configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub spec: GlmSpec,
    pub prior: PriorConfig,
    pub fit: FitConfig,
    /// Fit both role assignments of the split and average the estimators.
    pub swap_average: bool,
    /// Seed of the random half split.
    pub split_seed: u64,
}

/// One fitted role assignment.
#[derive(Clone, Debug)]
pub struct FitEntry {
    pub state: VariationalState,
    pub radius: f64,
    pub k: usize,
    pub swapped: bool,
}

/// A fitted model with everything prediction needs.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub spec: GlmSpec,
    pub entries: Vec<FitEntry>,
    pub centering: Option<DVector<f64>>,
    pub prior_eta: f64,
    pub prior_xi: f64,
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.entries[0].state.dim()
    }

    /// Coordinatewise average of the per-entry point estimates, each
    /// projected onto its truncation ball.
    pub fn point_estimate(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for e in &self.entries {
            acc += vi::project_to_ball(&e.state.mean, e.radius);
        }
        acc / self.entries.len() as f64
    }

    /// Posterior mean of the noise variance, when a variance block exists.
    pub fn sigma2_posterior_mean(&self) -> Option<f64> {
        let blocks: Vec<VarianceBlock> = self
            .entries
            .iter()
            .filter_map(|e| e.state.variance_block)
            .collect();
        if blocks.is_empty() {
            return None;
        }
        Some(blocks.iter().map(|b| b.mean_sigma2()).sum::<f64>() / blocks.len() as f64)
    }

    /// Apply the stored centering to a raw covariate vector.
    pub fn center(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.centering {
            Some(c) => x - c,
            None => x.clone(),
        }
    }

    /// Predictive summary for one raw test covariate vector. With two
    /// entries (swap-and-average) each draw samples one entry uniformly,
    /// i.e. the predictive is the even mixture of the two posteriors.
    pub fn predictive_summary<R: Rng + ?Sized>(
        &self,
        x_raw: &DVector<f64>,
        m: usize,
        level: f64,
        threshold: Option<f64>,
        rng: &mut R,
    ) -> Result<PredictiveSummary> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "need at least one predictive sample".into(),
            ));
        }
        let x = self.center(x_raw);
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            let entry = if self.entries.len() == 1 {
                &self.entries[0]
            } else {
                &self.entries[(rng.random::<u64>() as usize) % self.entries.len()]
            };
            let eps = DVector::from_fn(entry.state.factor.eps_dim(), |_, _| standard_normal(rng));
            let beta = reparam_sample(&entry.state, &eps)?;
            samples.push(self.spec.predict_mean(x.dot(&beta)));
        }
        let mc_mean = samples.iter().sum::<f64>() / m as f64;
        let (lower, upper) = interval(&samples, level)?;
        let confident = threshold.map(|t| lower > t || upper < t).unwrap_or(false);
        Ok(PredictiveSummary {
            mc_mean,
            lower,
            upper,
            confident,
        })
    }

    /// Summaries for every row of a raw test matrix, deterministic in `seed`.
    ///
    /// Coefficient draws are shared across test points and applied with one
    /// matrix product per chunk; each point's marginal summary is unchanged.
    pub fn predictive_summaries(
        &self,
        x_test: &DMatrix<f64>,
        m: usize,
        level: f64,
        threshold: Option<f64>,
        seed: u64,
    ) -> Result<Vec<PredictiveSummary>> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "need at least one predictive sample".into(),
            ));
        }
        let n_test = x_test.nrows();
        let p = self.dim();
        if x_test.ncols() != p {
            return Err(Error::InvalidArgument(format!(
                "test covariates have dimension {}, model expects {p}",
                x_test.ncols()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xt = x_test.clone();
        if let Some(c) = &self.centering {
            for mut row in xt.row_iter_mut() {
                row -= c.transpose();
            }
        }

        let mut samples = vec![Vec::with_capacity(m); n_test];
        let chunk = 256usize;
        let mut draws = DMatrix::zeros(p, chunk);
        let mut done = 0;
        while done < m {
            let width = chunk.min(m - done);
            for j in 0..width {
                let entry = if self.entries.len() == 1 {
                    &self.entries[0]
                } else {
                    &self.entries[(rng.random::<u64>() as usize) % self.entries.len()]
                };
                let eps = DVector::from_fn(entry.state.factor.eps_dim(), |_, _| {
                    standard_normal(&mut rng)
                });
                let beta = reparam_sample(&entry.state, &eps)?;
                draws.column_mut(j).copy_from(&beta);
            }
            let etas = &xt * draws.columns(0, width);
            for i in 0..n_test {
                for j in 0..width {
                    samples[i].push(self.spec.predict_mean(etas[(i, j)]));
                }
            }
            done += width;
        }

        samples
            .iter()
            .map(|s| {
                let mc_mean = s.iter().sum::<f64>() / m as f64;
                let (lower, upper) = interval(s, level)?;
                let confident = threshold.map(|t| lower > t || upper < t).unwrap_or(false);
                Ok(PredictiveSummary {
                    mc_mean,
                    lower,
                    upper,
                    confident,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile::from_model(self);
        serde_json::to_string_pretty(&file)
            .map_err(|e| Error::InvalidArgument(format!("model serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("model file does not parse: {e}"),
        })?;
        file.into_model()
    }
}

/// Run the pipeline on a dataset. Returns the model plus the per-entry fit
/// results (traces) for audit.
pub fn fit_pipeline(
    data: &Dataset,
    config: &PipelineConfig,
) -> Result<(FittedModel, Vec<FitResult>)> {
    let mut entries = Vec::new();
    let mut results = Vec::new();
    let roles: &[bool] = if config.swap_average {
        &[false, true]
    } else {
        &[false]
    };
    for (i, &swap) in roles.iter().enumerate() {
        let mut fit_config = config.fit.clone();
        fit_config.seed = config.fit.seed.wrapping_add(i as u64);
        let (entry, result) = fit_one_role(data, config, &fit_config, swap)?;
        entries.push(entry);
        results.push(result);
    }
    Ok((
        FittedModel {
            spec: config.spec,
            entries,
            centering: data.centering.clone(),
            prior_eta: config.prior.eta,
            prior_xi: config.prior.xi,
        },
        results,
    ))
}

fn fit_one_role(
    data: &Dataset,
    config: &PipelineConfig,
    fit_config: &FitConfig,
    swap: bool,
) -> Result<(FitEntry, FitResult)> {
    let parts = split(data, config.split_seed, swap)?;
    let spectrum = PartialSpectrum::from_data(&parts.d1_x, data.n(), config.prior.dense_threshold)?;
    let k = match config.prior.k {
        Some(k) => k,
        None => spectrum.explained_variance_rank(config.prior.evr)?,
    };
    let low_rank = spectrum.truncate(k)?;
    let prior = match config.prior.radius {
        Some(r) => SpectralPrior::new(low_rank, r)?,
        None => SpectralPrior::with_default_radius(low_rank)?,
    };
    let result = match config.spec.family {
        FamilyMember::GaussianUnknown => {
            let var_prior = VariancePrior::new(config.prior.eta, config.prior.xi)?;
            vi::fit_two_parameter(&parts, &config.spec, (&prior, &var_prior), fit_config)?
        }
        _ => vi::fit(&parts, &config.spec, &prior, fit_config)?,
    };
    Ok((
        FitEntry {
            state: result.state.clone(),
            radius: prior.radius(),
            k,
            swapped: swap,
        },
        result,
    ))
}

// --- model file schema ------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum FactorFile {
    Dense {
        dim: usize,
        /// Row-wise lower triangle including the diagonal.
        lower: Vec<f64>,
    },
    Diagonal {
        dim: usize,
        values: Vec<f64>,
    },
    LowRankDiag {
        dim: usize,
        rank: usize,
        /// Column-major p x rank block.
        low_rank: Vec<f64>,
        diag: Vec<f64>,
    },
}

impl FactorFile {
    fn from_factor(f: &CovFactor) -> Self {
        match f {
            CovFactor::Dense(l) => {
                let dim = l.nrows();
                let mut lower = Vec::with_capacity(dim * (dim + 1) / 2);
                for i in 0..dim {
                    for j in 0..=i {
                        lower.push(l[(i, j)]);
                    }
                }
                FactorFile::Dense { dim, lower }
            }
            CovFactor::Diagonal(d) => FactorFile::Diagonal {
                dim: d.len(),
                values: d.as_slice().to_vec(),
            },
            CovFactor::LowRankDiag { low_rank, diag } => FactorFile::LowRankDiag {
                dim: diag.len(),
                rank: low_rank.ncols(),
                low_rank: low_rank.as_slice().to_vec(),
                diag: diag.as_slice().to_vec(),
            },
        }
    }

    fn into_factor(self) -> Result<CovFactor> {
        let factor = match self {
            FactorFile::Dense { dim, lower } => {
                if lower.len() != dim * (dim + 1) / 2 {
                    return Err(Error::Parse {
                        line: 0,
                        msg: "dense factor length mismatch".into(),
                    });
                }
                let mut l = DMatrix::zeros(dim, dim);
                let mut pos = 0;
                for i in 0..dim {
                    for j in 0..=i {
                        l[(i, j)] = lower[pos];
                        pos += 1;
                    }
                }
                CovFactor::Dense(l)
            }
            FactorFile::Diagonal { dim, values } => {
                if values.len() != dim {
                    return Err(Error::Parse {
                        line: 0,
                        msg: "diagonal factor length mismatch".into(),
                    });
                }
                CovFactor::Diagonal(DVector::from_vec(values))
            }
            FactorFile::LowRankDiag {
                dim,
                rank,
                low_rank,
                diag,
            } => {
                if low_rank.len() != dim * rank || diag.len() != dim {
                    return Err(Error::Parse {
                        line: 0,
                        msg: "low-rank factor length mismatch".into(),
                    });
                }
                CovFactor::LowRankDiag {
                    low_rank: DMatrix::from_column_slice(dim, rank, &low_rank),
                    diag: DVector::from_vec(diag),
                }
            }
        };
        factor.validate()?;
        Ok(factor)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    mean: Vec<f64>,
    factor: FactorFile,
    variance_block: Option<VarianceBlock>,
    radius: f64,
    k: usize,
    swapped: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    spec: GlmSpec,
    centering: Option<Vec<f64>>,
    prior_eta: f64,
    prior_xi: f64,
    entries: Vec<EntryFile>,
}

impl ModelFile {
    fn from_model(m: &FittedModel) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            spec: m.spec,
            centering: m.centering.as_ref().map(|c| c.as_slice().to_vec()),
            prior_eta: m.prior_eta,
            prior_xi: m.prior_xi,
            entries: m
                .entries
                .iter()
                .map(|e| EntryFile {
                    mean: e.state.mean.as_slice().to_vec(),
                    factor: FactorFile::from_factor(&e.state.factor),
                    variance_block: e.state.variance_block,
                    radius: e.radius,
                    k: e.k,
                    swapped: e.swapped,
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<FittedModel> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "model file version {} unsupported (expected {MODEL_FILE_VERSION})",
                    self.version
                ),
            });
        }
        if self.entries.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "model file has no fitted entries".into(),
            });
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in self.entries {
            entries.push(FitEntry {
                state: VariationalState {
                    mean: DVector::from_vec(e.mean),
                    factor: e.factor.into_factor()?,
                    variance_block: e.variance_block,
                },
                radius: e.radius,
                k: e.k,
                swapped: e.swapped,
            });
        }
        Ok(FittedModel {
            spec: self.spec,
            entries,
            centering: self.centering.map(DVector::from_vec),
            prior_eta: self.prior_eta,
            prior_xi: self.prior_xi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_pair, CovariateDist, DgpKind};
    use crate::glm::LinkFunction;

    fn smoke_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            spec: GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli).unwrap(),
            prior: PriorConfig::default(),
            fit: FitConfig {
                max_iters: 300,
                seed,
                ..Default::default()
            },
            swap_average: false,
            split_seed: seed.wrapping_add(99),
        }
    }

    #[test]
    fn pipeline_fits_and_round_trips_through_json() {
        let (train, test) =
            gen_pair(DgpKind::Logistic, CovariateDist::Gaussian, 60, 30, 50, 4).unwrap();
        let (model, results) = fit_pipeline(&train, &smoke_config(7)).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].trace.len(), results[0].iterations);

        let text = model.to_json().unwrap();
        let back = FittedModel::from_json(&text).unwrap();
        assert_eq!(back.point_estimate(), model.point_estimate());

        // predictions agree bit-exactly after the round trip
        let a = model
            .predictive_summaries(&test.x, 64, 0.95, Some(0.5), 5)
            .unwrap();
        let b = back
            .predictive_summaries(&test.x, 64, 0.95, Some(0.5), 5)
            .unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.mc_mean, y.mc_mean);
            assert_eq!((x.lower, x.upper), (y.lower, y.upper));
        }
    }

    #[test]
    fn swap_average_produces_the_mean_of_both_fits() {
        let (train, _) =
            gen_pair(DgpKind::Logistic, CovariateDist::Gaussian, 60, 25, 10, 11).unwrap();
        let mut config = smoke_config(3);
        config.swap_average = true;
        let (model, results) = fit_pipeline(&train, &config).unwrap();
        assert_eq!(model.entries.len(), 2);
        assert_eq!(results.len(), 2);
        assert!(!model.entries[0].swapped);
        assert!(model.entries[1].swapped);

        let avg = (vi::project_to_ball(&model.entries[0].state.mean, model.entries[0].radius)
            + vi::project_to_ball(&model.entries[1].state.mean, model.entries[1].radius))
            / 2.0;
        assert_eq!(model.point_estimate(), avg);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (train, _) =
            gen_pair(DgpKind::Logistic, CovariateDist::Gaussian, 40, 20, 10, 2).unwrap();
        let (m1, r1) = fit_pipeline(&train, &smoke_config(13)).unwrap();
        let (m2, r2) = fit_pipeline(&train, &smoke_config(13)).unwrap();
        assert_eq!(m1.point_estimate(), m2.point_estimate());
        assert_eq!(r1[0].trace, r2[0].trace);
    }
}
