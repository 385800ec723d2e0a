//! Principal component regression baseline with cross-validated component
//! count: logistic (or Poisson) regression on component scores via IRLS, or
//! ordinary least squares for the Gaussian family.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::glm::{logistic, FamilyMember};
use crate::spectral::{PartialSpectrum, DEFAULT_DENSE_THRESHOLD};

const IRLS_MAX_ITERS: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const RIDGE: f64 = 1e-6;

/// A fitted principal component regression model.
#[derive(Clone, Debug)]
pub struct PcrModel {
    pub centering: DVector<f64>,
    /// p x c orthonormal loading matrix.
    pub loadings: DMatrix<f64>,
    /// Coefficients on the component scores.
    pub coefficients: DVector<f64>,
    pub intercept: f64,
    pub family: FamilyMember,
    /// Set when plain IRLS failed and the ridge-stabilized pass was used.
    pub ridge_fallback: bool,
}

impl PcrModel {
    pub fn components(&self) -> usize {
        self.loadings.ncols()
    }

    fn mean_from_eta(&self, eta: f64) -> f64 {
        canonical_mean(self.family, eta)
    }
}

fn canonical_mean(family: FamilyMember, eta: f64) -> f64 {
    match family {
        FamilyMember::Bernoulli => logistic(eta),
        FamilyMember::Poisson => eta.min(300.0).exp(),
        FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown => eta,
    }
}

/// Principal directions and component scores of one training block; the
/// expensive decomposition is shared across component counts during
/// cross-validation.
struct PcrBasis {
    centering: DVector<f64>,
    /// p x w directions, w = computed components.
    directions: DMatrix<f64>,
    /// n x w scores of the centered training rows.
    scores: DMatrix<f64>,
    /// Numerically positive components (the usable maximum).
    pos_rank: usize,
}

fn pcr_basis(data: &Dataset) -> Result<PcrBasis> {
    let n = data.n();
    let p = data.p();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "PCR needs at least 2 rows, got {n}"
        )));
    }
    let mut centering = DVector::zeros(p);
    for j in 0..p {
        centering[j] = data.x.column(j).sum() / n as f64;
    }
    // the Gram path is exact for every nonzero eigenvalue, so use it as soon
    // as it is the smaller problem
    let threshold = n.min(DEFAULT_DENSE_THRESHOLD);
    let spectrum = PartialSpectrum::from_data(&data.x, 2 * n, threshold)?;
    let width = spectrum.eigenvalues().len();
    let full = spectrum.truncate(width.max(1))?;
    let directions = full.eigenvectors().clone_owned();
    let mut xc = data.x.clone();
    for mut row in xc.row_iter_mut() {
        row -= centering.transpose();
    }
    let scores = &xc * &directions;
    Ok(PcrBasis {
        centering,
        directions,
        scores,
        pos_rank: full.pos_rank(),
    })
}

fn pcr_fit_from_basis(
    basis: &PcrBasis,
    y: &DVector<f64>,
    c: usize,
    family: FamilyMember,
) -> Result<PcrModel> {
    let n = y.len();
    let p = basis.centering.len();
    if c < 1 || c > (n - 1).min(p) {
        return Err(Error::InvalidArgument(format!(
            "component count {c} out of range [1, {}]",
            (n - 1).min(p)
        )));
    }
    if basis.pos_rank < c {
        return Err(Error::Numeric(format!(
            "data rank {} is below the requested {c} components",
            basis.pos_rank
        )));
    }
    let loadings = basis.directions.columns(0, c).into_owned();

    // design with intercept
    let mut design = DMatrix::zeros(n, c + 1);
    design.column_mut(0).fill(1.0);
    design
        .columns_mut(1, c)
        .copy_from(&basis.scores.columns(0, c));

    let (theta, ridge_fallback) = match family {
        FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown => ols_fit(&design, y)?,
        FamilyMember::Bernoulli | FamilyMember::Poisson => irls_fit(&design, y, family)?,
    };

    Ok(PcrModel {
        centering: basis.centering.clone(),
        loadings,
        coefficients: theta.rows(1, c).into_owned(),
        intercept: theta[0],
        family,
        ridge_fallback,
    })
}

/// Fit PCR with `c` components: project centered covariates onto the top-c
/// principal directions and fit the low-dimensional GLM with an intercept.
pub fn pcr_fit(data: &Dataset, c: usize, family: FamilyMember) -> Result<PcrModel> {
    let basis = pcr_basis(data)?;
    pcr_fit_from_basis(&basis, &data.y, c, family)
}

fn solve_normal_equations(
    gram: &DMatrix<f64>,
    rhs: &DVector<f64>,
    ridge: f64,
) -> Option<DVector<f64>> {
    let mut g = gram.clone();
    if ridge > 0.0 {
        for i in 0..g.nrows() {
            g[(i, i)] += ridge;
        }
    }
    Cholesky::new(g).map(|ch| ch.solve(rhs))
}

fn ols_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let gram = design.tr_mul(design);
    let rhs = design.tr_mul(y);
    if let Some(theta) = solve_normal_equations(&gram, &rhs, 0.0) {
        if theta.iter().all(|v| v.is_finite()) {
            return Ok((theta, false));
        }
    }
    let theta = solve_normal_equations(&gram, &rhs, RIDGE)
        .ok_or_else(|| Error::Numeric("normal equations are singular even with ridge".into()))?;
    Ok((theta, true))
}

fn irls_fit(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    family: FamilyMember,
) -> Result<(DVector<f64>, bool)> {
    match irls_pass(design, y, family, 0.0) {
        Ok(theta) => Ok((theta, false)),
        Err(_) => {
            let theta = irls_pass(design, y, family, RIDGE)
                .map_err(|e| Error::Numeric(format!("ridge-stabilized IRLS also failed: {e}")))?;
            Ok((theta, true))
        }
    }
}

fn irls_pass(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    family: FamilyMember,
    ridge: f64,
) -> Result<DVector<f64>> {
    let n = design.nrows();
    let q = design.ncols();
    let mut theta = DVector::zeros(q);
    for _ in 0..IRLS_MAX_ITERS {
        let eta = design * &theta;
        let mut weights = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let mu = canonical_mean(family, eta[i]);
            let w = match family {
                FamilyMember::Bernoulli => mu * (1.0 - mu),
                FamilyMember::Poisson => mu,
                _ => 1.0,
            }
            .max(1e-10);
            weights[i] = w;
            z[i] = eta[i] + (y[i] - mu) / w;
        }
        // weighted normal equations A' W A theta = A' W z
        let mut wa = design.clone();
        for i in 0..n {
            let w = weights[i];
            for j in 0..q {
                wa[(i, j)] *= w;
            }
        }
        let gram = design.tr_mul(&wa);
        let rhs = wa.tr_mul(&z);
        let next = solve_normal_equations(&gram, &rhs, ridge)
            .ok_or_else(|| Error::Numeric("IRLS system is singular".into()))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "IRLS diverged to non-finite coefficients".into(),
            ));
        }
        let change = (&next - &theta).norm() / next.norm().max(1.0);
        theta = next;
        if change < IRLS_TOL {
            return Ok(theta);
        }
    }
    Ok(theta)
}

/// Mean prediction for one covariate vector.
pub fn pcr_predict(model: &PcrModel, x: &DVector<f64>) -> Result<f64> {
    if x.len() != model.centering.len() {
        return Err(Error::InvalidArgument(format!(
            "covariate has dimension {}, model expects {}",
            x.len(),
            model.centering.len()
        )));
    }
    let centered = x - &model.centering;
    let scores = model.loadings.tr_mul(&centered);
    Ok(model.mean_from_eta(model.intercept + scores.dot(&model.coefficients)))
}

fn deviance(family: FamilyMember, y: f64, mu: f64) -> f64 {
    match family {
        FamilyMember::Bernoulli => {
            let mu = mu.clamp(1e-12, 1.0 - 1e-12);
            -2.0 * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln())
        }
        FamilyMember::Poisson => {
            let mu = mu.max(1e-12);
            let term = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
            2.0 * (term - (y - mu))
        }
        _ => (y - mu) * (y - mu),
    }
}

/// Select the component count minimizing mean held-out deviance over k folds.
/// Infeasible grid values (beyond the training rank) are skipped; ties break
/// toward the smaller count.
pub fn cv_select(
    data: &Dataset,
    grid: impl IntoIterator<Item = usize>,
    folds: usize,
    family: FamilyMember,
    seed: u64,
) -> Result<usize> {
    let n = data.n();
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if n < folds * 2 {
        return Err(Error::DegenerateInput(format!(
            "{n} rows are too few for {folds}-fold cross-validation"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.random::<u64>() as usize) % (i + 1);
        idx.swap(i, j);
    }
    let fold_of: Vec<usize> = {
        let mut assign = vec![0usize; n];
        for (pos, &row) in idx.iter().enumerate() {
            assign[row] = pos % folds;
        }
        assign
    };

    // one decomposition per fold, shared by every component count
    let mut fold_data = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let train_x = DMatrix::from_fn(train_rows.len(), data.p(), |i, j| {
            data.x[(train_rows[i], j)]
        });
        let train_y =
            DVector::from_iterator(train_rows.len(), train_rows.iter().map(|&i| data.y[i]));
        let train = Dataset::new(train_x, train_y, family)?;
        let basis = pcr_basis(&train)?;
        fold_data.push((basis, train.y, test_rows));
    }

    let mut best: Option<(f64, usize)> = None;
    for c in grid {
        let mut total_dev = 0.0;
        let mut total_count = 0usize;
        let mut feasible = true;
        for (basis, train_y, test_rows) in &fold_data {
            if c > (train_y.len() - 1).min(data.p()) {
                feasible = false;
                break;
            }
            let model = match pcr_fit_from_basis(basis, train_y, c, family) {
                Ok(m) => m,
                Err(Error::Numeric(_)) => {
                    feasible = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            for &i in test_rows {
                let x = data.x.row(i).transpose();
                let mu = pcr_predict(&model, &x)?;
                total_dev += deviance(family, data.y[i], mu);
                total_count += 1;
            }
        }
        if !feasible {
            continue;
        }
        let mean_dev = total_dev / total_count as f64;
        match best {
            None => best = Some((mean_dev, c)),
            Some((best_dev, _)) if mean_dev < best_dev => best = Some((mean_dev, c)),
            _ => {}
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::InvalidArgument("no feasible component count in the grid".into()))
}
