//! Python bindings: dataset generation, pipeline fitting, prediction with
//! uncertainty, and the evaluation metrics.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use esglm::datagen::{self, CovariateDist, DgpKind, SpectrumSpec};
use esglm::error::Error;
use esglm::eval::MetricsReport;
use esglm::glm::{FamilyMember, GlmSpec, LinkFunction};
use esglm::pipeline::{fit_pipeline, FittedModel, PipelineConfig, PriorConfig};
use esglm::spectral::PartialSpectrum;
use esglm::vi::{FactorParam, FitConfig};

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_family(family: &str) -> Result<FamilyMember, Error> {
    match family {
        "gaussian-unknown" => Ok(FamilyMember::GaussianUnknown),
        other => other.parse(),
    }
}

fn parse_dist(dist: &str) -> Result<CovariateDist, Error> {
    dist.parse()
}

fn matrix_from_rows(x: Vec<Vec<f64>>) -> Result<DMatrix<f64>, Error> {
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "x must have at least one row".into(),
        ));
    }
    let p = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != p) {
        return Err(Error::InvalidArgument(format!(
            "ragged row: expected {p} entries, found {}",
            row.len()
        )));
    }
    let flat: Vec<f64> = x.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(flat.len() / p, p, &flat))
}

/// A covariate matrix with its response vector.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Build a dataset from row-major covariates and a response vector.
    #[staticmethod]
    #[pyo3(signature = (x, y, family = "bernoulli"))]
    fn from_arrays(x: Vec<Vec<f64>>, y: Vec<f64>, family: &str) -> PyResult<Self> {
        let matrix = matrix_from_rows(x).map_err(err)?;
        let inner = datagen::Dataset::new(
            matrix,
            DVector::from_vec(y),
            parse_family(family).map_err(err)?,
        )
        .map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n())
            .map(|i| self.inner.x.row(i).iter().copied().collect())
            .collect()
    }

    fn y(&self) -> Vec<f64> {
        self.inner.y.as_slice().to_vec()
    }

    /// The simulated coefficient vector, when this dataset was generated.
    fn true_beta(&self) -> Option<Vec<f64>> {
        self.inner.true_beta.as_ref().map(|b| b.as_slice().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, p={}, family={})",
            self.inner.n(),
            self.inner.p(),
            self.inner.family.name()
        )
    }
}

/// `p = floor(n^{4/3})`, the overparameterized dimension rule.
#[pyfunction]
fn p_for_n(n: usize) -> usize {
    datagen::p_for_n(n)
}

/// Bernoulli responses through the logistic link with the decaying
/// eigenvalue profile.
#[pyfunction]
#[pyo3(signature = (n, p, seed, dist = "gaussian"))]
fn gen_logistic(n: usize, p: usize, seed: u64, dist: &str) -> PyResult<PyDataset> {
    let sspec = SpectrumSpec::exp_decay(n, p);
    let inner =
        datagen::gen_logistic(n, p, &sspec, parse_dist(dist).map_err(err)?, seed).map_err(err)?;
    Ok(PyDataset { inner })
}

/// Softplus single-neuron responses with unit Gaussian noise.
#[pyfunction]
#[pyo3(signature = (n, p, seed, dist = "gaussian"))]
fn gen_softplus_gaussian(n: usize, p: usize, seed: u64, dist: &str) -> PyResult<PyDataset> {
    let sspec = SpectrumSpec::exp_decay(n, p);
    let inner = datagen::gen_softplus_gaussian(n, p, &sspec, parse_dist(dist).map_err(err)?, seed)
        .map_err(err)?;
    Ok(PyDataset { inner })
}

/// Train/test pair sharing one coefficient draw. Regression test responses
/// are the noiseless means.
#[pyfunction]
#[pyo3(signature = (preset, n, test_n, seed, p = None))]
fn gen_pair(
    preset: &str,
    n: usize,
    test_n: usize,
    seed: u64,
    p: Option<usize>,
) -> PyResult<(PyDataset, PyDataset)> {
    let (kind, dist) = match preset {
        "logistic-gaussian" => (DgpKind::Logistic, CovariateDist::Gaussian),
        "logistic-laplace" => (DgpKind::Logistic, CovariateDist::Laplace),
        "softplus-gaussian" => (DgpKind::SoftplusGaussian, CovariateDist::Gaussian),
        "softplus-laplace" => (DgpKind::SoftplusGaussian, CovariateDist::Laplace),
        other => {
            return Err(PyValueError::new_err(format!("unknown preset `{other}`")));
        }
    };
    let p = p.unwrap_or_else(|| datagen::p_for_n(n));
    let (train, test) = datagen::gen_pair(kind, dist, n, p, test_n, seed).map_err(err)?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

/// Eigenvalues of the `2/total_n` centered covariance of a data block.
#[pyfunction]
fn covariance_eigenvalues(x: Vec<Vec<f64>>, total_n: usize) -> PyResult<Vec<f64>> {
    let matrix = matrix_from_rows(x).map_err(err)?;
    let spectrum = PartialSpectrum::from_data(&matrix, total_n, usize::MAX).map_err(err)?;
    Ok(spectrum.eigenvalues().to_vec())
}

fn metrics_to_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("zero_one_loss", r.zero_one_loss)?;
    d.set_item("auc", r.auc)?;
    d.set_item("um", r.um)?;
    d.set_item("cc", r.cc)?;
    d.set_item("rmse", r.rmse)?;
    d.set_item("cp", r.cp)?;
    d.set_item("al", r.al)?;
    d.set_item("excess_risk", r.excess_risk)?;
    let counts = PyDict::new(py);
    counts.set_item("n_test", r.counts.n_test)?;
    counts.set_item("n_positive", r.counts.n_positive)?;
    counts.set_item("n_negative", r.counts.n_negative)?;
    counts.set_item("n_misclassified", r.counts.n_misclassified)?;
    counts.set_item("n_confident", r.counts.n_confident)?;
    counts.set_item("n_confident_correct", r.counts.n_confident_correct)?;
    counts.set_item(
        "n_confident_misclassified",
        r.counts.n_confident_misclassified,
    )?;
    counts.set_item(
        "n_unconfident_misclassified",
        r.counts.n_unconfident_misclassified,
    )?;
    counts.set_item("n_covered", r.counts.n_covered)?;
    d.set_item("counts", counts)?;
    Ok(d)
}

/// A fitted model: point estimates, predictive intervals, and metrics.
#[pyclass(name = "Model")]
struct PyModel {
    inner: FittedModel,
}

#[pymethods]
impl PyModel {
    fn point_estimate(&self) -> Vec<f64> {
        self.inner.point_estimate().as_slice().to_vec()
    }

    /// Posterior mean of the noise variance (two-parameter model only).
    fn sigma2_posterior_mean(&self) -> Option<f64> {
        self.inner.sigma2_posterior_mean()
    }

    /// Mean prediction `g(x' b)` at the point estimate.
    fn predict_mean(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!(
                "x has dimension {}, model expects {}",
                x.len(),
                self.inner.dim()
            )));
        }
        let x = self.inner.center(&DVector::from_vec(x));
        Ok(self
            .inner
            .spec
            .predict_mean(x.dot(&self.inner.point_estimate())))
    }

    /// `(mc_mean, lower, upper)` of the Monte Carlo predictive for one point.
    #[pyo3(signature = (x, m = 1000, level = 0.95, seed = 0))]
    fn predictive_interval(
        &self,
        x: Vec<f64>,
        m: usize,
        level: f64,
        seed: u64,
    ) -> PyResult<(f64, f64, f64)> {
        let summaries = self
            .inner
            .predictive_summaries(
                &DMatrix::from_row_slice(1, x.len(), &x),
                m,
                level,
                None,
                seed,
            )
            .map_err(err)?;
        let s = &summaries[0];
        Ok((s.mc_mean, s.lower, s.upper))
    }

    /// Classification metrics against binary test labels.
    #[pyo3(signature = (test, m = 1000, level = 0.95, threshold = 0.5, seed = 0))]
    fn evaluate_classification<'py>(
        &self,
        py: Python<'py>,
        test: &PyDataset,
        m: usize,
        level: f64,
        threshold: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let summaries = self
            .inner
            .predictive_summaries(&test.inner.x, m, level, Some(threshold), seed)
            .map_err(err)?;
        let report =
            esglm::eval::classification_metrics(&summaries, test.inner.y.as_slice(), threshold)
                .map_err(err)?;
        metrics_to_dict(py, &report)
    }

    /// Regression metrics against noiseless mean values in `test.y`.
    #[pyo3(signature = (test, m = 1000, level = 0.95, seed = 0))]
    fn evaluate_regression<'py>(
        &self,
        py: Python<'py>,
        test: &PyDataset,
        m: usize,
        level: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let summaries = self
            .inner
            .predictive_summaries(&test.inner.x, m, level, None, seed)
            .map_err(err)?;
        let report =
            esglm::eval::regression_metrics(&summaries, test.inner.y.as_slice()).map_err(err)?;
        metrics_to_dict(py, &report)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: FittedModel::from_json(text).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(p={}, family={}, link={}, entries={})",
            self.inner.dim(),
            self.inner.spec.family.name(),
            self.inner.spec.link.name(),
            self.inner.entries.len()
        )
    }
}

/// Split the data, build the effective-spectral prior from one half, and fit
/// the posterior approximation by stochastic variational inference.
#[pyfunction]
#[pyo3(signature = (
    data, family = "bernoulli", link = "logistic", k = None, evr = 0.95,
    radius = None, eta = 1.0, xi = 1.0, lr = 1e-2, iters = 5000, tol = 1e-5,
    mc = 1, factor = None, minibatch = None, swap_average = false, seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    data: &PyDataset,
    family: &str,
    link: &str,
    k: Option<usize>,
    evr: f64,
    radius: Option<f64>,
    eta: f64,
    xi: f64,
    lr: f64,
    iters: usize,
    tol: f64,
    mc: usize,
    factor: Option<&str>,
    minibatch: Option<usize>,
    swap_average: bool,
    seed: u64,
) -> PyResult<PyModel> {
    let spec = GlmSpec::new(
        link.parse::<LinkFunction>().map_err(err)?,
        parse_family(family).map_err(err)?,
    )
    .map_err(err)?;
    let factor = match factor {
        None => None,
        Some("dense") => Some(FactorParam::Dense),
        Some("diag") => Some(FactorParam::Diagonal),
        Some("lowrank") => Some(FactorParam::LowRank { rank: 0 }),
        Some(other) => {
            return Err(PyValueError::new_err(format!(
                "unknown factor `{other}` (expected dense|diag|lowrank)"
            )))
        }
    };
    let config = PipelineConfig {
        spec,
        prior: PriorConfig {
            k,
            evr,
            radius,
            eta,
            xi,
            ..Default::default()
        },
        fit: FitConfig {
            mc_samples: mc,
            max_iters: iters,
            learning_rate: lr,
            tolerance: tol,
            seed: seed.wrapping_add(1),
            factor,
            minibatch,
            ..Default::default()
        },
        swap_average,
        split_seed: seed,
    };
    let (model, _results) = fit_pipeline(&data.inner, &config).map_err(err)?;
    Ok(PyModel { inner: model })
}

#[pymodule]
fn esglm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(p_for_n, m)?)?;
    m.add_function(wrap_pyfunction!(gen_logistic, m)?)?;
    m.add_function(wrap_pyfunction!(gen_softplus_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gen_pair, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
