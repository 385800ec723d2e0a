//! Empirical covariance estimation, eigendecomposition, low-rank truncation,
//! and pseudoinverse action.
//!
//! Two decomposition paths are provided. The dense path eigendecomposes the
//! p x p covariance directly. For tall problems (p above a configurable
//! threshold, default [`DEFAULT_DENSE_THRESHOLD`]) the Gram path decomposes
//! the n1 x n1 matrix of centered rows instead, which is exact for every
//! nonzero eigenvalue because the empirical covariance has rank at most n1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this dimension the Gram path is used instead of a dense p x p
/// eigendecomposition.
pub const DEFAULT_DENSE_THRESHOLD: usize = 4096;

/// Relative scale under which a round-off negative eigenvalue is clamped to 0.
const CLAMP_TOL: f64 = 1e-10;

/// A symmetric covariance matrix.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Validates symmetry (1e-10 relative), non-negative diagonal, and
    /// finiteness.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::InvalidArgument(format!(
                "covariance must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("covariance has non-finite entries".into()));
        }
        let scale = entries.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..entries.nrows() {
            if entries[(i, i)] < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "covariance diagonal entry {i} is negative: {}",
                    entries[(i, i)]
                )));
            }
            for j in (i + 1)..entries.ncols() {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "covariance is not symmetric at ({i},{j}): {} vs {}",
                        entries[(i, j)],
                        entries[(j, i)]
                    )));
                }
            }
        }
        Ok(CovarianceMatrix { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Full eigendecomposition of a covariance matrix, eigenvalues sorted
/// non-increasing, eigenvectors as orthonormal columns.
#[derive(Clone, Debug)]
pub struct Spectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn diagnostics(
        &self,
        n: usize,
        l_kappa: usize,
        u_kappa: usize,
        rho_n: f64,
    ) -> Result<SpectrumDiagnostics> {
        spectrum_diagnostics(self.eigenvalues.as_slice(), n, l_kappa, u_kappa, rho_n)
    }
}

/// The top-k slice of a spectrum together with its pseudoinverse action.
#[derive(Clone, Debug)]
pub struct LowRankCovariance {
    rank: usize,
    eigenvalues: Vec<f64>,
    /// p x w with w = retained columns (w <= rank; the Gram path cannot
    /// produce eigenvectors for the zero eigenspace, which carries no action).
    eigenvectors: DMatrix<f64>,
    pos_rank: usize,
}

impl LowRankCovariance {
    fn from_sorted(eigenvalues: Vec<f64>, eigenvectors: DMatrix<f64>, rank: usize) -> Self {
        let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
        let p = eigenvectors.nrows();
        let threshold = f64::EPSILON * lambda_max * p as f64;
        let pos_rank = eigenvalues.iter().take_while(|&&l| l > threshold).count();
        LowRankCovariance {
            rank,
            eigenvalues,
            eigenvectors,
            pos_rank,
        }
    }

    /// Gram-path decomposition straight from a covariate block: exact top-k
    /// eigenpairs of the 2/total_n centered covariance without materializing
    /// the p x p matrix.
    pub fn from_tall_data(x1: &DMatrix<f64>, total_n: usize, k: usize) -> Result<Self> {
        let partial = PartialSpectrum::from_tall_data(x1, total_n)?;
        partial.truncate(k)
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// The requested truncation level k.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of retained eigenvalues above the numerical-rank threshold.
    pub fn pos_rank(&self) -> usize {
        self.pos_rank
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).sum()
    }

    /// Sum of `ln lambda_j` over the numerically positive eigenvalues.
    pub fn log_pseudo_det(&self) -> f64 {
        self.eigenvalues[..self.pos_rank]
            .iter()
            .map(|l| l.ln())
            .sum()
    }

    /// `Sigma_{1:k} v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.eigenvectors.tr_mul(v);
        for (c, &l) in coords.iter_mut().zip(self.eigenvalues.iter()) {
            *c *= l.max(0.0);
        }
        &self.eigenvectors * coords
    }

    /// Pseudoinverse action `Sigma_{1:k}^+ v`, summing over the numerically
    /// positive eigenvalues only.
    pub fn pinv_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.eigenvectors.tr_mul(v);
        for (j, c) in coords.iter_mut().enumerate() {
            if j < self.pos_rank {
                *c /= self.eigenvalues[j];
            } else {
                *c = 0.0;
            }
        }
        &self.eigenvectors * coords
    }

    /// `v' Sigma_{1:k}^+ v`.
    pub fn pinv_quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let coords = self.eigenvectors.tr_mul(v);
        coords
            .iter()
            .take(self.pos_rank)
            .zip(self.eigenvalues.iter())
            .map(|(c, l)| c * c / l)
            .sum()
    }

    /// Materialize the truncated matrix (test/diagnostic use).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(p, p);
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            if l > 0.0 {
                let v = self.eigenvectors.column(j);
                m.syger(l, &v, &v, 1.0);
            }
        }
        m.fill_upper_triangle_with_lower_triangle();
        m
    }

    /// Materialize the pseudoinverse (test/diagnostic use).
    pub fn pinv_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(p, p);
        for j in 0..self.pos_rank {
            let v = self.eigenvectors.column(j);
            m.syger(1.0 / self.eigenvalues[j], &v, &v, 1.0);
        }
        m.fill_upper_triangle_with_lower_triangle();
        m
    }
}

/// All computed eigenpairs of a covariance, possibly fewer columns than p
/// when produced by the Gram path (the implied remainder is the zero
/// eigenspace).
#[derive(Clone, Debug)]
pub struct PartialSpectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    dim: usize,
}

impl PartialSpectrum {
    pub fn from_full(spectrum: Spectrum) -> Self {
        let dim = spectrum.dim();
        PartialSpectrum {
            eigenvalues: spectrum.eigenvalues.as_slice().to_vec(),
            eigenvectors: spectrum.eigenvectors,
            dim,
        }
    }

    /// Gram-path decomposition of the 2/total_n centered covariance of `x1`.
    pub fn from_tall_data(x1: &DMatrix<f64>, total_n: usize) -> Result<Self> {
        let (xc, scale) = centered_block(x1, total_n)?;
        let n1 = xc.nrows();
        let p = xc.ncols();
        let mut gram = &xc * xc.transpose();
        gram *= scale;
        gram.fill_upper_triangle_with_lower_triangle();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n1).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let lambda_max = order
            .first()
            .map(|&j| eig.eigenvalues[j])
            .unwrap_or(0.0)
            .max(0.0);
        let keep_tol = f64::EPSILON * lambda_max.max(1.0) * n1 as f64;

        let mut eigenvalues = Vec::new();
        let mut columns: Vec<DVector<f64>> = Vec::new();
        for &j in &order {
            let m = eig.eigenvalues[j];
            if m <= keep_tol {
                break;
            }
            // v = Xc' u / ||Xc' u||, with ||Xc' u||^2 = m / scale
            let u = eig.eigenvectors.column(j);
            let mut v = xc.tr_mul(&u);
            v /= (m / scale).sqrt();
            eigenvalues.push(m);
            columns.push(v);
        }
        let eigenvectors = if columns.is_empty() {
            DMatrix::zeros(p, 0)
        } else {
            DMatrix::from_columns(&columns)
        };
        Ok(PartialSpectrum {
            eigenvalues,
            eigenvectors,
            dim: p,
        })
    }

    /// Decompose the covariance of a covariate block, choosing the dense or
    /// Gram path by `dense_threshold`.
    pub fn from_data(x1: &DMatrix<f64>, total_n: usize, dense_threshold: usize) -> Result<Self> {
        if x1.ncols() > dense_threshold {
            Self::from_tall_data(x1, total_n)
        } else {
            let cov = empirical_covariance(x1, total_n)?;
            Ok(Self::from_full(spectral_decompose(&cov)?))
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Top-k truncation. The requested k may exceed the number of computed
    /// columns; the excess is the zero eigenspace and carries no action.
    pub fn truncate(&self, k: usize) -> Result<LowRankCovariance> {
        if k == 0 || k > self.dim {
            return Err(Error::InvalidArgument(format!(
                "truncation rank {k} out of range [1, {}]",
                self.dim
            )));
        }
        let w = k.min(self.eigenvalues.len());
        let eigenvalues = self.eigenvalues[..w].to_vec();
        let eigenvectors = self.eigenvectors.columns(0, w).into_owned();
        Ok(LowRankCovariance::from_sorted(eigenvalues, eigenvectors, k))
    }

    /// Smallest k whose leading eigenvalues capture `target` of the trace.
    pub fn explained_variance_rank(&self, target: f64) -> Result<usize> {
        if !(0.0 < target && target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "explained-variance target must lie in (0, 1], got {target}"
            )));
        }
        let total: f64 = self.eigenvalues.iter().filter(|&&l| l > 0.0).sum();
        if total <= 0.0 {
            return Err(Error::DegenerateInput(
                "covariance has zero trace; no informative directions".into(),
            ));
        }
        let mut acc = 0.0;
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            acc += l.max(0.0);
            if acc >= target * total {
                return Ok(j + 1);
            }
        }
        Ok(self.eigenvalues.len())
    }
}

fn centered_block(x1: &DMatrix<f64>, total_n: usize) -> Result<(DMatrix<f64>, f64)> {
    let n1 = x1.nrows();
    if n1 < 2 {
        return Err(Error::DegenerateInput(format!(
            "covariance needs at least 2 rows, got {n1}"
        )));
    }
    if total_n < n1 {
        return Err(Error::InvalidArgument(format!(
            "total_n = {total_n} smaller than the block size {n1}"
        )));
    }
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("covariates contain non-finite entries".into()));
    }
    let mean = x1.row_mean();
    let mut xc = x1.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    Ok((xc, 2.0 / total_n as f64))
}

/// The centered covariance estimator `(2/total_n) sum (x_i - xbar)(x_i - xbar)'`
/// over the rows of `x1`.
pub fn empirical_covariance(x1: &DMatrix<f64>, total_n: usize) -> Result<CovarianceMatrix> {
    let (xc, scale) = centered_block(x1, total_n)?;
    let mut cov = xc.tr_mul(&xc);
    cov *= scale;
    // kill round-off asymmetry
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    CovarianceMatrix::new(cov)
}

/// Full symmetric eigendecomposition, sorted non-increasing, with round-off
/// negatives clamped to zero.
pub fn spectral_decompose(cov: &CovarianceMatrix) -> Result<Spectrum> {
    let eig = cov.entries.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        let scale = cov.entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        return Err(Error::Numeric(format!(
            "eigen-solver produced non-finite eigenvalues (dim {}, max |entry| {scale:.3e})",
            cov.dim()
        )));
    }
    let p = cov.dim();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let clamp = CLAMP_TOL * scale.max(1.0);
    let eigenvalues = DVector::from_iterator(
        p,
        order.iter().map(|&j| {
            let l = eig.eigenvalues[j];
            if l < 0.0 && l >= -clamp {
                0.0
            } else {
                l
            }
        }),
    );
    let eigenvectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&j| eig.eigenvectors.column(j))
            .collect::<Vec<_>>(),
    );
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Top-k truncation of a full spectrum.
pub fn truncate(spectrum: &Spectrum, k: usize) -> Result<LowRankCovariance> {
    let p = spectrum.dim();
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {k} out of range [1, {p}]"
        )));
    }
    let eigenvalues = spectrum.eigenvalues.as_slice()[..k].to_vec();
    let eigenvectors = spectrum.eigenvectors.columns(0, k).into_owned();
    Ok(LowRankCovariance::from_sorted(eigenvalues, eigenvectors, k))
}

/// Descriptive per-k proxies for the eigenvalue regularity conditions. No
/// pass/fail claim is made; the concentration rate `rho_n` is caller-supplied
/// because it is unobservable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumDiagnostics {
    /// `(k, (rho_n + lambda_k) * lambda_k * k)` for k in `[l_kappa, u_kappa]`.
    pub bulk_decay: Vec<(usize, f64)>,
    /// `sum_{j > l_kappa} lambda_j`.
    pub tail_sum: f64,
    /// `u_kappa / n`.
    pub bulk_size_ratio: f64,
}

pub fn spectrum_diagnostics(
    eigenvalues: &[f64],
    n: usize,
    l_kappa: usize,
    u_kappa: usize,
    rho_n: f64,
) -> Result<SpectrumDiagnostics> {
    let p = eigenvalues.len();
    if l_kappa < 1 || l_kappa > u_kappa || u_kappa > p {
        return Err(Error::InvalidArgument(format!(
            "index bounds must satisfy 1 <= L <= U <= p, got L={l_kappa}, U={u_kappa}, p={p}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let bulk_decay = (l_kappa..=u_kappa)
        .map(|k| {
            let l = eigenvalues[k - 1];
            (k, (rho_n + l) * l * k as f64)
        })
        .collect();
    let tail_sum = eigenvalues[l_kappa..].iter().sum();
    Ok(SpectrumDiagnostics {
        bulk_decay,
        tail_sum,
        bulk_size_ratio: u_kappa as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> CovarianceMatrix {
        let b = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = &b * b.transpose();
        m.fill_upper_triangle_with_lower_triangle();
        CovarianceMatrix::new(m).unwrap()
    }

    fn random_symmetric(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = (&b + b.transpose()) * 0.5;
        m.fill_upper_triangle_with_lower_triangle();
        m
    }

    #[test]
    fn identical_rows_give_zero_matrix() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let cov = empirical_covariance(&x, 4).unwrap();
        assert!(cov.as_matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_case_diag_half_two() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
        let cov = empirical_covariance(&x, 8).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        assert_eq!(cov.as_matrix(), &expected);
    }

    #[test]
    fn scale_factor_is_two_over_total_n() {
        // one centered outer product contributes (2/n) * sum
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        // centered rows are (1, -1); sum of squares 2; times 2/10 = 0.4
        let cov = empirical_covariance(&x, 10).unwrap();
        assert!((cov.as_matrix()[(0, 0)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn covariance_rejects_degenerate_and_non_finite() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            empirical_covariance(&one, 2),
            Err(Error::DegenerateInput(_))
        ));
        let bad = DMatrix::from_row_slice(2, 1, &[f64::NAN, 0.0]);
        assert!(matches!(empirical_covariance(&bad, 4), Err(Error::Data(_))));
    }

    #[test]
    fn diagonal_spectrum_sorted() {
        let cov = CovarianceMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, 2.0, 0.0,
        ])))
        .unwrap();
        let spec = spectral_decompose(&cov).unwrap();
        assert_eq!(spec.eigenvalues().as_slice(), &[2.0, 1.0, 0.0]);
        // eigenvectors are a signed permutation of the standard basis
        for col in spec.eigenvectors().column_iter() {
            let ones = col.iter().filter(|v| (v.abs() - 1.0).abs() < 1e-12).count();
            let zeros = col.iter().filter(|v| v.abs() < 1e-12).count();
            assert_eq!((ones, zeros), (1, 2));
        }
    }

    #[test]
    fn rank_one_spectrum() {
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let m = &v * v.transpose();
        let cov = CovarianceMatrix::new(m).unwrap();
        let spec = spectral_decompose(&cov).unwrap();
        assert!((spec.eigenvalues()[0] - 1.0).abs() < 1e-12);
        assert!(spec.eigenvalues()[1].abs() < 1e-12);
    }

    #[test]
    fn reconstruction_oracle_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_symmetric(3, &mut rng);
        // build through CovarianceMatrix by shifting the diagonal positive
        let shifted = &m + DMatrix::identity(3, 3) * 3.0;
        let cov = CovarianceMatrix::new(shifted.clone()).unwrap();
        let spec = spectral_decompose(&cov).unwrap();
        let recon = spec.eigenvectors()
            * DMatrix::from_diagonal(spec.eigenvalues())
            * spec.eigenvectors().transpose();
        assert!((&recon - &shifted).norm() / shifted.norm() < 1e-10);
    }

    #[test]
    fn truncate_examples() {
        let cov = CovarianceMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            2.0, 1.0, 0.0,
        ])))
        .unwrap();
        let spec = spectral_decompose(&cov).unwrap();

        let k2 = truncate(&spec, 2).unwrap();
        assert_eq!(k2.pos_rank(), 2);
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0]));
        assert!((k2.to_matrix() - &expect).norm() < 1e-12);
        let pinv_expect = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 0.0]));
        assert!((k2.pinv_matrix() - &pinv_expect).norm() < 1e-12);

        let full = truncate(&spec, 3).unwrap();
        assert!((full.to_matrix() - cov.as_matrix()).norm() < 1e-12);

        let k1 = truncate(&spec, 1).unwrap();
        let rank1 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 0.0]));
        assert!((k1.to_matrix() - &rank1).norm() < 1e-12);

        assert!(truncate(&spec, 0).is_err());
        assert!(truncate(&spec, 4).is_err());
    }

    #[test]
    fn pseudoinverse_sandwich_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [3usize, 8, 20] {
            let cov = random_psd(dim, &mut rng);
            let spec = spectral_decompose(&cov).unwrap();
            let k = (dim / 2).max(1);
            let lr = truncate(&spec, k).unwrap();
            let a = lr.to_matrix();
            let pinv = lr.pinv_matrix();
            let denom = a.norm().max(1e-12);
            assert!((&a * &pinv * &a - &a).norm() / denom < 1e-8, "dim {dim}");
            let denom_p = pinv.norm().max(1e-12);
            assert!(
                (&pinv * &a * &pinv - &pinv).norm() / denom_p < 1e-8,
                "dim {dim}"
            );
        }
    }

    #[test]
    fn monotone_truncation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_psd(10, &mut rng);
        let spec = spectral_decompose(&cov).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=10 {
            let lr = truncate(&spec, k).unwrap();
            let err = (cov.as_matrix() - lr.to_matrix()).norm();
            assert!(err <= prev + 1e-12, "k={k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn clamped_eigenvalues_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // rank-deficient covariance: round-off negatives show up
        let b = DMatrix::from_fn(10, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = &b * b.transpose();
        m.fill_upper_triangle_with_lower_triangle();
        let spec = spectral_decompose(&CovarianceMatrix::new(m).unwrap()).unwrap();
        assert!(spec.eigenvalues().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn gram_path_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = DMatrix::from_fn(12, 30, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let dense = PartialSpectrum::from_data(&x, 24, usize::MAX).unwrap();
        let gram = PartialSpectrum::from_tall_data(&x, 24).unwrap();
        let k = 6;
        let lr_dense = dense.truncate(k).unwrap();
        let lr_gram = gram.truncate(k).unwrap();
        assert!(
            (lr_dense.to_matrix() - lr_gram.to_matrix()).norm() / lr_dense.to_matrix().norm()
                < 1e-10
        );
        for (a, b) in lr_dense
            .eigenvalues()
            .iter()
            .zip(lr_gram.eigenvalues().iter())
        {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn flat_spectrum_tail_sum() {
        let eigs = vec![0.3; 20];
        let d = spectrum_diagnostics(&eigs, 100, 5, 10, 0.1).unwrap();
        assert!((d.tail_sum - 15.0 * 0.3).abs() < 1e-12);
        assert!((d.bulk_size_ratio - 0.1).abs() < 1e-15);
    }

    #[test]
    fn exp_decay_tail_sum_against_direct_summation() {
        let p = 200;
        let eigs: Vec<f64> = (1..=p).map(|j| 10.0 * (-(j as f64) / 8.0).exp()).collect();
        let l_kappa = 10;
        let d = spectrum_diagnostics(&eigs, 100, l_kappa, 20, 0.0).unwrap();
        // geometric closed form truncated at p
        let r = (-1.0f64 / 8.0).exp();
        let closed = 10.0 * r.powi(11) * (1.0 - r.powi((p - l_kappa) as i32)) / (1.0 - r);
        assert!((d.tail_sum - closed).abs() < 1e-9 * closed);
    }

    #[test]
    fn zero_rho_reduces_condition_two_proxy() {
        let eigs = vec![2.0, 1.5, 1.0, 0.5];
        let d = spectrum_diagnostics(&eigs, 50, 2, 3, 0.0).unwrap();
        assert_eq!(d.bulk_decay[0], (2, 1.5 * 1.5 * 2.0));
        assert_eq!(d.bulk_decay[1], (3, 1.0 * 1.0 * 3.0));
    }

    #[test]
    fn diagnostics_rejects_bad_bounds() {
        let eigs = vec![1.0; 5];
        assert!(spectrum_diagnostics(&eigs, 10, 0, 3, 0.0).is_err());
        assert!(spectrum_diagnostics(&eigs, 10, 4, 3, 0.0).is_err());
        assert!(spectrum_diagnostics(&eigs, 10, 2, 6, 0.0).is_err());
    }

    #[test]
    fn explained_variance_rank_selects_smallest_k() {
        let x = DMatrix::from_fn(40, 6, |i, j| {
            ((i * 7 + j * 13) % 11) as f64 / 11.0 * (1.0 / (j + 1) as f64)
        });
        let ps = PartialSpectrum::from_data(&x, 80, usize::MAX).unwrap();
        let k = ps.explained_variance_rank(0.95).unwrap();
        let total: f64 = ps.eigenvalues().iter().filter(|&&l| l > 0.0).sum();
        let head: f64 = ps.eigenvalues()[..k].iter().sum();
        assert!(head >= 0.95 * total);
        if k > 1 {
            let head_prev: f64 = ps.eigenvalues()[..k - 1].iter().sum();
            assert!(head_prev < 0.95 * total);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn reconstruction_and_orthonormality(dim in 2usize..24, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_psd(dim, &mut rng);
            let spec = spectral_decompose(&cov).unwrap();
            let v = spec.eigenvectors();
            let gram = v.transpose() * v;
            prop_assert!((gram - DMatrix::identity(dim, dim)).norm() < 1e-8);
            let recon = v * DMatrix::from_diagonal(spec.eigenvalues()) * v.transpose();
            prop_assert!((&recon - cov.as_matrix()).norm() / cov.as_matrix().norm().max(1e-12) < 1e-8);
        }

        #[test]
        fn sandwich_property(dim in 2usize..16, seed in 0u64..1000, kfrac in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_psd(dim, &mut rng);
            let spec = spectral_decompose(&cov).unwrap();
            let k = ((dim as f64 * kfrac).ceil() as usize).clamp(1, dim);
            let lr = truncate(&spec, k).unwrap();
            let a = lr.to_matrix();
            let pinv = lr.pinv_matrix();
            prop_assert!((&a * &pinv * &a - &a).norm() / a.norm().max(1e-12) < 1e-8);
        }
    }
}
