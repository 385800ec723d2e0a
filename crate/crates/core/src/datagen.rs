//! Simulation data generators, dataset splitting, and file ingestion.
//!
//! Covariates are drawn coordinatewise in the eigenbasis (diagonal
//! population covariance), with the eigenvalue profile
//! `lambda_j = 10 exp(-j/8) + n exp(-sqrt(n))/p`. Responses come from the
//! logistic Bernoulli model, the softplus single-neuron model with unit
//! Gaussian noise, or a general link/variance Gaussian model.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{FamilyMember, GlmSpec, LinkFunction};
use crate::prior::standard_normal;

/// `p = floor(n^{4/3})`, the overparameterized dimension rule.
pub fn p_for_n(n: usize) -> usize {
    (n as f64).powf(4.0 / 3.0).floor() as usize
}

/// Eigenvalue profile of the population covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpectrumRule {
    /// `lambda_j = 10 exp(-j/8) + n exp(-sqrt(n)) / p`.
    ExpDecay,
    /// Constant eigenvalues.
    Flat(f64),
}

/// Eigenvalue formula plus its `(n, p)` parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub rule: SpectrumRule,
    pub n: usize,
    pub p: usize,
}

impl SpectrumSpec {
    pub fn exp_decay(n: usize, p: usize) -> Self {
        SpectrumSpec {
            rule: SpectrumRule::ExpDecay,
            n,
            p,
        }
    }

    /// `lambda_j` for 1-based `j`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        match self.rule {
            SpectrumRule::ExpDecay => {
                let n = self.n as f64;
                10.0 * (-(j as f64) / 8.0).exp() + n * (-n.sqrt()).exp() / self.p as f64
            }
            SpectrumRule::Flat(c) => c,
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.p).map(|j| self.eigenvalue(j)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("spectrum needs n, p >= 1".into()));
        }
        if let Some(j) = (1..=self.p).find(|&j| {
            let l = self.eigenvalue(j);
            l <= 0.0 || l.is_nan()
        }) {
            return Err(Error::InvalidArgument(format!(
                "eigenvalue {j} is not positive"
            )));
        }
        Ok(())
    }
}

/// Coordinate distribution of the covariates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateDist {
    Gaussian,
    Laplace,
}

impl FromStr for CovariateDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(CovariateDist::Gaussian),
            "laplace" => Ok(CovariateDist::Laplace),
            other => Err(Error::InvalidArgument(format!(
                "unknown covariate distribution `{other}` (expected gaussian|laplace)"
            ))),
        }
    }
}

impl fmt::Display for CovariateDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovariateDist::Gaussian => "gaussian",
            CovariateDist::Laplace => "laplace",
        })
    }
}

/// A covariate matrix with its response vector and provenance.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub family: FamilyMember,
    pub true_beta: Option<DVector<f64>>,
    pub true_sigma2: Option<f64>,
    /// Column means subtracted at ingestion time, kept for test-time reuse.
    pub centering: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, family: FamilyMember) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "covariate rows ({}) and response length ({}) differ",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite entries".into()));
        }
        Ok(Dataset {
            x,
            y,
            family,
            true_beta: None,
            true_sigma2: None,
            centering: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// The two split roles: `d1_x` builds the prior, `(d2_x, d2_y)` supplies the
/// likelihood. Responses of the prior block are discarded by construction.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub d1_x: DMatrix<f64>,
    pub d2_x: DMatrix<f64>,
    pub d2_y: DVector<f64>,
    pub swapped: bool,
    pub d1_indices: Vec<usize>,
    pub d2_indices: Vec<usize>,
}

/// Uniform random half split; `swap` exchanges the two roles of the same
/// shuffle. Sizes differ by at most one, with the likelihood block taking
/// the extra row.
pub fn split(data: &Dataset, seed: u64, swap: bool) -> Result<SplitData> {
    let n = data.n();
    if n < 4 {
        return Err(Error::DegenerateInput(format!(
            "splitting needs at least 4 rows, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.random::<u64>() as usize) % (i + 1);
        idx.swap(i, j);
    }
    let half = n / 2;
    let (first, second) = idx.split_at(half);
    let (prior_rows, lik_rows) = if swap {
        (second, first)
    } else {
        (first, second)
    };

    let gather_x =
        |rows: &[usize]| DMatrix::from_fn(rows.len(), data.p(), |i, j| data.x[(rows[i], j)]);
    let d2_y = DVector::from_iterator(lik_rows.len(), lik_rows.iter().map(|&i| data.y[i]));
    Ok(SplitData {
        d1_x: gather_x(prior_rows),
        d2_x: gather_x(lik_rows),
        d2_y,
        swapped: swap,
        d1_indices: prior_rows.to_vec(),
        d2_indices: lik_rows.to_vec(),
    })
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // inverse CDF from a uniform on (-1/2, 1/2)
    let v: f64 = rng.random::<f64>() - 0.5;
    -scale * v.signum() * (1.0 - 2.0 * v.abs()).ln()
}

fn covariates_with(
    n: usize,
    p: usize,
    dist: CovariateDist,
    sspec: &SpectrumSpec,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let scales: Vec<f64> = (1..=p)
        .map(|j| match dist {
            CovariateDist::Gaussian => sspec.eigenvalue(j).sqrt(),
            CovariateDist::Laplace => (sspec.eigenvalue(j) / 2.0).sqrt(),
        })
        .collect();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = match dist {
                CovariateDist::Gaussian => scales[j] * standard_normal(rng),
                CovariateDist::Laplace => laplace(rng, scales[j]),
            };
        }
    }
    x
}

/// Independent mean-zero rows with componentwise variance `lambda_j`.
pub fn gen_covariates(
    n: usize,
    p: usize,
    dist: CovariateDist,
    sspec: &SpectrumSpec,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be at least 1".into()));
    }
    sspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(covariates_with(n, p, dist, sspec, &mut rng))
}

fn draw_beta(p: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(p, |_, _| standard_normal(rng))
}

fn logistic_labels(x: &DMatrix<f64>, beta: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let etas = x * beta;
    DVector::from_iterator(
        x.nrows(),
        etas.iter().map(|&eta| {
            let pr = LinkFunction::Logistic.eval(eta);
            if rng.random::<f64>() < pr {
                1.0
            } else {
                0.0
            }
        }),
    )
}

/// Bernoulli responses through the logistic link, with `beta ~ N(0, I_p)`.
pub fn gen_logistic(
    n: usize,
    p: usize,
    sspec: &SpectrumSpec,
    dist: CovariateDist,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be at least 1".into()));
    }
    sspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = draw_beta(p, &mut rng);
    let x = covariates_with(n, p, dist, sspec, &mut rng);
    let y = logistic_labels(&x, &beta, &mut rng);
    let mut data = Dataset::new(x, y, FamilyMember::Bernoulli)?;
    data.true_beta = Some(beta);
    Ok(data)
}

/// Gaussian responses `y = g(x'beta) + sigma eps` under an arbitrary link.
pub fn gen_single_neuron(
    n: usize,
    p: usize,
    sspec: &SpectrumSpec,
    dist: CovariateDist,
    link: LinkFunction,
    sigma2: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be at least 1".into()));
    }
    if sigma2 < 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be finite and non-negative, got {sigma2}"
        )));
    }
    sspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = draw_beta(p, &mut rng);
    let x = covariates_with(n, p, dist, sspec, &mut rng);
    let etas = &x * &beta;
    let sigma = sigma2.sqrt();
    let y = DVector::from_iterator(
        n,
        etas.iter()
            .map(|&eta| link.eval(eta) + sigma * standard_normal(&mut rng)),
    );
    let mut data = Dataset::new(x, y, FamilyMember::GaussianFixed { sigma2 })?;
    data.true_beta = Some(beta);
    data.true_sigma2 = Some(sigma2);
    Ok(data)
}

/// The softplus single-neuron model with unit noise.
pub fn gen_softplus_gaussian(
    n: usize,
    p: usize,
    sspec: &SpectrumSpec,
    dist: CovariateDist,
    seed: u64,
) -> Result<Dataset> {
    gen_single_neuron(n, p, sspec, dist, LinkFunction::Softplus, 1.0, seed)
}

/// A simulated data-generating process for the experiment harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DgpKind {
    Logistic,
    SoftplusGaussian,
    Gaussian { link: LinkFunction, sigma2: f64 },
}

impl DgpKind {
    pub fn glm_spec(&self) -> Result<GlmSpec> {
        match self {
            DgpKind::Logistic => GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli),
            DgpKind::SoftplusGaussian => {
                GlmSpec::new(LinkFunction::Softplus, FamilyMember::gaussian())
            }
            DgpKind::Gaussian { link, sigma2 } => {
                GlmSpec::new(*link, FamilyMember::GaussianFixed { sigma2: *sigma2 })
            }
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, DgpKind::Logistic)
    }
}

/// Train/test pair sharing one coefficient draw. Regression test responses
/// are the noiseless means `g(x'beta)`; classification test responses are
/// sampled labels.
pub fn gen_pair(
    kind: DgpKind,
    dist: CovariateDist,
    n: usize,
    p: usize,
    test_n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n == 0 || p == 0 || test_n == 0 {
        return Err(Error::InvalidArgument(
            "n, p, test_n must be at least 1".into(),
        ));
    }
    let sspec = SpectrumSpec::exp_decay(n, p);
    sspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = draw_beta(p, &mut rng);

    let (link, sigma2, family) = match kind {
        DgpKind::Logistic => (LinkFunction::Logistic, 0.0, FamilyMember::Bernoulli),
        DgpKind::SoftplusGaussian => (
            LinkFunction::Softplus,
            1.0,
            FamilyMember::GaussianFixed { sigma2: 1.0 },
        ),
        DgpKind::Gaussian { link, sigma2 } => {
            (link, sigma2, FamilyMember::GaussianFixed { sigma2 })
        }
    };

    let train_x = covariates_with(n, p, dist, &sspec, &mut rng);
    let train_y = match kind {
        DgpKind::Logistic => logistic_labels(&train_x, &beta, &mut rng),
        _ => {
            let etas = &train_x * &beta;
            let sigma = sigma2.sqrt();
            DVector::from_iterator(
                n,
                etas.iter()
                    .map(|&eta| link.eval(eta) + sigma * standard_normal(&mut rng)),
            )
        }
    };

    let test_x = covariates_with(test_n, p, dist, &sspec, &mut rng);
    let test_y = match kind {
        DgpKind::Logistic => logistic_labels(&test_x, &beta, &mut rng),
        _ => {
            let etas = &test_x * &beta;
            DVector::from_iterator(test_n, etas.iter().map(|&eta| link.eval(eta)))
        }
    };

    let mut train = Dataset::new(train_x, train_y, family)?;
    train.true_beta = Some(beta.clone());
    if !kind.is_classification() {
        train.true_sigma2 = Some(sigma2);
    }
    let mut test = Dataset::new(test_x, test_y, family)?;
    test.true_beta = Some(beta);
    Ok((train, test))
}

/// Supported on-disk formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableFormat {
    /// Header row required; last column is the response.
    Csv,
    /// Whitespace-separated features with a separate -1/+1 label file.
    Arcene,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "arcene" => Ok(TableFormat::Arcene),
            other => Err(Error::InvalidArgument(format!(
                "unknown table format `{other}` (expected csv|arcene)"
            ))),
        }
    }
}

/// Load a dataset and center its covariates columnwise, retaining the
/// centering vector for test-time reuse.
pub fn load_table(
    path: &Path,
    format: TableFormat,
    label_path: Option<&Path>,
    family: FamilyMember,
) -> Result<Dataset> {
    let mut data = load_table_raw(path, format, label_path, family)?;
    let p = data.p();
    let n = data.n() as f64;
    let mut means = DVector::zeros(p);
    for j in 0..p {
        means[j] = data.x.column(j).sum() / n;
    }
    for i in 0..data.n() {
        for j in 0..p {
            data.x[(i, j)] -= means[j];
        }
    }
    data.centering = Some(means);
    Ok(data)
}

/// Load without centering (for test sets, which are centered with the
/// training vector instead).
pub fn load_table_raw(
    path: &Path,
    format: TableFormat,
    label_path: Option<&Path>,
    family: FamilyMember,
) -> Result<Dataset> {
    match format {
        TableFormat::Csv => load_csv(path, family),
        TableFormat::Arcene => {
            let labels = label_path.ok_or_else(|| {
                Error::InvalidArgument("arcene format requires a label file".into())
            })?;
            load_arcene(path, labels)
        }
    }
}

fn load_csv(path: &Path, family: FamilyMember) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file; a header row is required".into(),
            })
        }
    };
    let ncols = header.split(',').count();
    if ncols < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("need at least one covariate column plus a response, got {ncols} columns"),
        });
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut line_no = 1usize;
    for line in lines {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {ncols} cells, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .trim_matches('"')
                .parse()
                .map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("cell {} (`{cell}`) is not numeric", c + 1),
                })?;
            if c + 1 == ncols {
                y.push(v);
            } else {
                rows.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: "no data rows".into(),
        });
    }
    let n = y.len();
    let p = ncols - 1;
    let x = DMatrix::from_row_slice(n, p, &rows);
    Dataset::new(x, DVector::from_vec(y), family)
}

fn load_arcene(features: &Path, labels: &Path) -> Result<Dataset> {
    let file = fs::File::open(features)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            row.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("token `{tok}` is not numeric"),
            })?);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("ragged row: expected {w} features, found {}", row.len()),
                });
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    let p = width.ok_or(Error::Parse {
        line: 1,
        msg: "feature file has no rows".into(),
    })?;

    let file = fs::File::open(labels)?;
    let reader = BufReader::new(file);
    let mut y = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        for tok in line.split_whitespace() {
            let v = match tok {
                "-1" => 0.0,
                "1" | "+1" => 1.0,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("label `{other}` is not -1 or +1"),
                    })
                }
            };
            y.push(v);
        }
    }
    if y.len() != rows.len() {
        return Err(Error::Parse {
            line: rows.len().min(y.len()) + 1,
            msg: format!(
                "label count ({}) does not match feature rows ({})",
                y.len(),
                rows.len()
            ),
        });
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = DMatrix::from_row_slice(n, p, &flat);
    Dataset::new(x, DVector::from_vec(y), FamilyMember::Bernoulli)
}

/// Write `x1,...,xp,y` with 17-significant-digit decimals so that a reload
/// is bit-exact.
pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let p = data.p();
    let mut header = String::new();
    for j in 1..=p {
        header.push('x');
        header.push_str(&j.to_string());
        header.push(',');
    }
    header.push('y');
    writeln!(out, "{header}")?;
    let mut line = String::new();
    for i in 0..data.n() {
        line.clear();
        for j in 0..p {
            line.push_str(&format!("{:.16e},", data.x[(i, j)]));
        }
        line.push_str(&format!("{:.16e}", data.y[i]));
        writeln!(out, "{line}")?;
    }
    Ok(())
}
