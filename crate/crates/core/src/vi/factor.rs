//! Covariance-factor parameterizations for the Gaussian variational family.
//!
//! The variational covariance is `Sigma = F F'` where `F` is one of:
//! a dense lower-triangular p x p matrix, a positive diagonal, or a
//! low-rank-plus-diagonal pair `[A, diag(d)]` with `Sigma = A A' + diag(d)^2`.
//! For the latter the noise vector has dimension r + p, split as
//! `(eps_lowrank, eps_diag)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Choice of covariance-factor parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorParam {
    Dense,
    Diagonal,
    LowRank { rank: usize },
}

/// A concrete covariance factor.
#[derive(Clone, Debug)]
pub enum CovFactor {
    /// Lower-triangular p x p with positive diagonal.
    Dense(DMatrix<f64>),
    /// Positive entries, length p.
    Diagonal(DVector<f64>),
    /// `Sigma = low_rank low_rank' + diag(diag)^2`, diag positive.
    LowRankDiag {
        low_rank: DMatrix<f64>,
        diag: DVector<f64>,
    },
}

/// A gradient with the same free-entry layout as the factor it differentiates.
#[derive(Clone, Debug)]
pub enum FactorGrad {
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
    LowRankDiag {
        low_rank: DMatrix<f64>,
        diag: DVector<f64>,
    },
}

impl CovFactor {
    pub fn param(&self) -> FactorParam {
        match self {
            CovFactor::Dense(_) => FactorParam::Dense,
            CovFactor::Diagonal(_) => FactorParam::Diagonal,
            CovFactor::LowRankDiag { low_rank, .. } => FactorParam::LowRank {
                rank: low_rank.ncols(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovFactor::Dense(l) => l.nrows(),
            CovFactor::Diagonal(d) => d.len(),
            CovFactor::LowRankDiag { diag, .. } => diag.len(),
        }
    }

    /// Dimension of the standard-normal noise vector the factor consumes.
    pub fn eps_dim(&self) -> usize {
        match self {
            CovFactor::Dense(l) => l.nrows(),
            CovFactor::Diagonal(d) => d.len(),
            CovFactor::LowRankDiag { low_rank, diag } => low_rank.ncols() + diag.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovFactor::Dense(l) => {
                if l.nrows() != l.ncols() {
                    return Err(Error::InvalidArgument("dense factor must be square".into()));
                }
                for i in 0..l.nrows() {
                    if l[(i, i)] <= 0.0 || l[(i, i)].is_nan() {
                        return Err(Error::Numeric(format!(
                            "dense factor diagonal entry {i} is not positive: {}",
                            l[(i, i)]
                        )));
                    }
                    for j in (i + 1)..l.ncols() {
                        if l[(i, j)] != 0.0 {
                            return Err(Error::InvalidArgument(format!(
                                "dense factor must be lower triangular; entry ({i},{j}) = {}",
                                l[(i, j)]
                            )));
                        }
                    }
                }
            }
            CovFactor::Diagonal(d) => {
                if let Some((i, &v)) = d.iter().enumerate().find(|(_, &v)| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Numeric(format!(
                        "diagonal factor entry {i} is not positive: {v}"
                    )));
                }
            }
            CovFactor::LowRankDiag { low_rank, diag } => {
                if low_rank.nrows() != diag.len() {
                    return Err(Error::InvalidArgument(
                        "low-rank block and diagonal disagree on dimension".into(),
                    ));
                }
                if let Some((i, &v)) = diag
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| v <= 0.0 || v.is_nan())
                {
                    return Err(Error::Numeric(format!(
                        "low-rank factor diagonal entry {i} is not positive: {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `F eps`.
    pub fn apply_eps(&self, eps: &DVector<f64>) -> Result<DVector<f64>> {
        if eps.len() != self.eps_dim() {
            return Err(Error::InvalidArgument(format!(
                "noise has dimension {}, factor expects {}",
                eps.len(),
                self.eps_dim()
            )));
        }
        Ok(match self {
            CovFactor::Dense(l) => l * eps,
            CovFactor::Diagonal(d) => d.component_mul(eps),
            CovFactor::LowRankDiag { low_rank, diag } => {
                let r = low_rank.ncols();
                let eps_lr = eps.rows(0, r);
                let eps_d = eps.rows(r, diag.len());
                low_rank * eps_lr + diag.component_mul(&eps_d.into_owned())
            }
        })
    }

    /// `ln |Sigma|`.
    pub fn log_det_cov(&self) -> Result<f64> {
        match self {
            CovFactor::Dense(l) => Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()),
            CovFactor::Diagonal(d) => Ok(2.0 * d.iter().map(|v| v.ln()).sum::<f64>()),
            CovFactor::LowRankDiag { diag, .. } => {
                let (_, _, ln_det_m) = self.woodbury()?;
                Ok(2.0 * diag.iter().map(|v| v.ln()).sum::<f64>() + ln_det_m)
            }
        }
    }

    /// Gradient of `1/2 ln |Sigma|` with respect to the free entries.
    pub fn entropy_grad(&self) -> Result<FactorGrad> {
        match self {
            CovFactor::Dense(l) => {
                // only the diagonal of L enters the determinant
                let p = l.nrows();
                let mut g = DMatrix::zeros(p, p);
                for i in 0..p {
                    g[(i, i)] = 1.0 / l[(i, i)];
                }
                Ok(FactorGrad::Dense(g))
            }
            CovFactor::Diagonal(d) => Ok(FactorGrad::Diagonal(d.map(|v| 1.0 / v))),
            CovFactor::LowRankDiag { diag, .. } => {
                let (sigma_inv_f, diag_sigma_inv, _) = self.woodbury()?;
                let dd = DVector::from_iterator(
                    diag.len(),
                    diag.iter().zip(diag_sigma_inv.iter()).map(|(d, s)| d * s),
                );
                Ok(FactorGrad::LowRankDiag {
                    low_rank: sigma_inv_f,
                    diag: dd,
                })
            }
        }
    }

    /// For the low-rank factor: `(Sigma^{-1} A, diag(Sigma^{-1}), ln det M)`
    /// with `M = I + A' D^{-2} A`, via the Woodbury identity.
    fn woodbury(&self) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let CovFactor::LowRankDiag { low_rank, diag } = self else {
            return Err(Error::InvalidArgument(
                "woodbury path applies to the low-rank factor only".into(),
            ));
        };
        let p = diag.len();
        let r = low_rank.ncols();
        let mut w = low_rank.clone();
        for i in 0..p {
            let inv_d2 = 1.0 / (diag[i] * diag[i]);
            for a in 0..r {
                w[(i, a)] *= inv_d2;
            }
        }
        let mut m = DMatrix::identity(r, r);
        m += low_rank.tr_mul(&w);
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::Numeric("low-rank factor capacitance is not SPD".into()))?;
        let ln_det_m = 2.0 * (0..r).map(|a| chol.l_dirty()[(a, a)].ln()).sum::<f64>();
        // Sigma^{-1} A = W M^{-1} = (M^{-1} W')'
        let t = chol.solve(&w.transpose()); // r x p
        let sigma_inv_f = t.transpose();
        let diag_sigma_inv = DVector::from_iterator(
            p,
            (0..p).map(|i| {
                let mut s = 1.0 / (diag[i] * diag[i]);
                for a in 0..r {
                    s -= w[(i, a)] * t[(a, i)];
                }
                s
            }),
        );
        Ok((sigma_inv_f, diag_sigma_inv, ln_det_m))
    }

    /// Materialize `Sigma` (tests and small-p diagnostics).
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match self {
            CovFactor::Dense(l) => l * l.transpose(),
            CovFactor::Diagonal(d) => DMatrix::from_diagonal(&d.component_mul(d)),
            CovFactor::LowRankDiag { low_rank, diag } => {
                low_rank * low_rank.transpose() + DMatrix::from_diagonal(&diag.component_mul(diag))
            }
        }
    }
}

impl FactorGrad {
    /// Infinity norm over the free entries.
    pub fn max_abs(&self) -> f64 {
        match self {
            FactorGrad::Dense(m) => m.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
            FactorGrad::Diagonal(d) => d.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
            FactorGrad::LowRankDiag { low_rank, diag } => low_rank
                .iter()
                .chain(diag.iter())
                .fold(0.0_f64, |a, v| a.max(v.abs())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lowrank_example() -> CovFactor {
        let a = DMatrix::from_row_slice(3, 2, &[0.5, 0.1, -0.2, 0.4, 0.3, -0.6]);
        let d = DVector::from_vec(vec![0.7, 0.9, 1.1]);
        CovFactor::LowRankDiag {
            low_rank: a,
            diag: d,
        }
    }

    #[test]
    fn log_det_matches_direct_computation() {
        let f = lowrank_example();
        let direct = f.cov_matrix().determinant().ln();
        assert!((f.log_det_cov().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn apply_eps_splits_noise() {
        let f = lowrank_example();
        let eps = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 2.0]);
        let out = f.apply_eps(&eps).unwrap();
        // = first column of A + 2 * d_3 e_3
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] + 0.2).abs() < 1e-15);
        assert!((out[2] - (0.3 + 2.2)).abs() < 1e-15);
    }

    #[test]
    fn entropy_grad_matches_finite_differences() {
        let f = lowrank_example();
        let FactorGrad::LowRankDiag {
            low_rank: ga,
            diag: gd,
        } = f.entropy_grad().unwrap()
        else {
            panic!()
        };
        let h = 1e-6;
        let CovFactor::LowRankDiag {
            low_rank: a,
            diag: d,
        } = &f
        else {
            panic!()
        };
        for i in 0..3 {
            for j in 0..2 {
                let mut ap = a.clone();
                ap[(i, j)] += h;
                let mut am = a.clone();
                am[(i, j)] -= h;
                let fp = CovFactor::LowRankDiag {
                    low_rank: ap,
                    diag: d.clone(),
                };
                let fm = CovFactor::LowRankDiag {
                    low_rank: am,
                    diag: d.clone(),
                };
                let fd = (fp.log_det_cov().unwrap() - fm.log_det_cov().unwrap()) / (4.0 * h);
                assert!(
                    (ga[(i, j)] - fd).abs() < 1e-7,
                    "A[{i},{j}]: {} vs {fd}",
                    ga[(i, j)]
                );
            }
            let mut dp = d.clone();
            dp[i] += h;
            let mut dm = d.clone();
            dm[i] -= h;
            let fp = CovFactor::LowRankDiag {
                low_rank: a.clone(),
                diag: dp,
            };
            let fm = CovFactor::LowRankDiag {
                low_rank: a.clone(),
                diag: dm,
            };
            let fd = (fp.log_det_cov().unwrap() - fm.log_det_cov().unwrap()) / (4.0 * h);
            assert!((gd[i] - fd).abs() < 1e-7, "d[{i}]: {} vs {fd}", gd[i]);
        }
    }

    #[test]
    fn validation_catches_bad_factors() {
        let neg = CovFactor::Diagonal(DVector::from_vec(vec![0.2, -0.1]));
        assert!(neg.validate().is_err());

        let mut l = DMatrix::identity(2, 2);
        l[(0, 1)] = 0.5;
        assert!(CovFactor::Dense(l).validate().is_err());

        let good = CovFactor::Dense(DMatrix::identity(3, 3));
        assert!(good.validate().is_ok());
    }
}
