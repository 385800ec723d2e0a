//! Link functions and exponential-family likelihoods.
//!
//! A [`GlmSpec`] pairs a [`LinkFunction`] with a [`FamilyMember`] and provides
//! the per-observation log density and its derivative with respect to the
//! linear predictor `eta = x'beta`, which is what the variational gradients
//! consume.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap for the bounded-exponential link.
pub const DEFAULT_BEXP_CAP: f64 = 1e3;

/// Numerically stable `ln(1 + e^r)`.
pub fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn logistic(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

/// A Lipschitz-continuous mean function mapping the linear predictor to the
/// conditional mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LinkFunction {
    Identity,
    Logistic,
    Softplus,
    /// Smooth bounded positive link `g(r) = B * logistic(r - ln B)`; bounded
    /// by `cap` and strictly positive, as Poisson regression requires.
    BoundedExp {
        cap: f64,
    },
}

impl LinkFunction {
    pub fn bounded_exp(cap: f64) -> Result<Self> {
        if cap <= 0.0 || !cap.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bounded-exponential cap must be finite and positive, got {cap}"
            )));
        }
        Ok(LinkFunction::BoundedExp { cap })
    }

    pub fn eval(self, r: f64) -> f64 {
        match self {
            LinkFunction::Identity => r,
            LinkFunction::Logistic => logistic(r),
            LinkFunction::Softplus => softplus(r),
            LinkFunction::BoundedExp { cap } => cap * logistic(r - cap.ln()),
        }
    }

    pub fn deriv(self, r: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Logistic => {
                let g = logistic(r);
                g * (1.0 - g)
            }
            LinkFunction::Softplus => logistic(r),
            LinkFunction::BoundedExp { cap } => {
                let s = logistic(r - cap.ln());
                cap * s * (1.0 - s)
            }
        }
    }

    /// A finite Lipschitz constant of the map.
    pub fn lipschitz(self) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Logistic => 0.25,
            LinkFunction::Softplus => 1.0,
            LinkFunction::BoundedExp { cap } => cap / 4.0,
        }
    }

    /// Open interval the link maps into, as `(lo, hi)`.
    pub fn range(self) -> (f64, f64) {
        match self {
            LinkFunction::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            LinkFunction::Logistic => (0.0, 1.0),
            LinkFunction::Softplus => (0.0, f64::INFINITY),
            LinkFunction::BoundedExp { cap } => (0.0, cap),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Logistic => "logistic",
            LinkFunction::Softplus => "softplus",
            LinkFunction::BoundedExp { .. } => "bexp",
        }
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(LinkFunction::Identity),
            "logistic" => Ok(LinkFunction::Logistic),
            "softplus" => Ok(LinkFunction::Softplus),
            "bexp" => Ok(LinkFunction::BoundedExp {
                cap: DEFAULT_BEXP_CAP,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown link `{other}` (expected identity|logistic|softplus|bexp)"
            ))),
        }
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A one-parameter exponential-family member (plus the two-parameter Gaussian
/// with unknown variance).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FamilyMember {
    Bernoulli,
    Poisson,
    /// Gaussian response with known variance.
    GaussianFixed {
        sigma2: f64,
    },
    /// Gaussian response whose variance is a model parameter.
    GaussianUnknown,
}

impl FamilyMember {
    /// Fixed-variance Gaussian with the unit-noise default.
    pub fn gaussian() -> Self {
        FamilyMember::GaussianFixed { sigma2: 1.0 }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(
            self,
            FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyMember::Bernoulli => "bernoulli",
            FamilyMember::Poisson => "poisson",
            FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown => "gaussian",
        }
    }
}

impl fmt::Display for FamilyMember {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyMember {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(FamilyMember::Bernoulli),
            "poisson" => Ok(FamilyMember::Poisson),
            "gaussian" => Ok(FamilyMember::gaussian()),
            other => Err(Error::InvalidArgument(format!(
                "unknown family `{other}` (expected bernoulli|poisson|gaussian)"
            ))),
        }
    }
}

/// A link/family pair with the compatibility invariant enforced at
/// construction: Bernoulli needs a link into (0,1), Poisson into (0,inf).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub link: LinkFunction,
    pub family: FamilyMember,
}

impl GlmSpec {
    pub fn new(link: LinkFunction, family: FamilyMember) -> Result<Self> {
        let (lo, hi) = link.range();
        match family {
            FamilyMember::Bernoulli => {
                if lo < 0.0 || hi > 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "bernoulli requires a link with range inside (0,1); {} maps into ({lo},{hi})",
                        link.name()
                    )));
                }
            }
            FamilyMember::Poisson => {
                if lo < 0.0 || hi <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "poisson requires a link with range inside (0,inf); {} maps into ({lo},{hi})",
                        link.name()
                    )));
                }
            }
            FamilyMember::GaussianFixed { sigma2 } => {
                if sigma2 <= 0.0 || !sigma2.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "gaussian fixed variance must be finite and positive, got {sigma2}"
                    )));
                }
            }
            FamilyMember::GaussianUnknown => {}
        }
        Ok(GlmSpec { link, family })
    }

    /// Mean prediction `g(eta)`.
    pub fn predict_mean(&self, eta: f64) -> f64 {
        self.link.eval(eta)
    }

    fn check_sigma2(&self, sigma2: Option<f64>) -> Result<Option<f64>> {
        match (self.family, sigma2) {
            (FamilyMember::GaussianUnknown, Some(s)) if s > 0.0 && s.is_finite() => Ok(Some(s)),
            (FamilyMember::GaussianUnknown, Some(s)) => Err(Error::InvalidArgument(format!(
                "sigma2 must be finite and positive, got {s}"
            ))),
            (FamilyMember::GaussianUnknown, None) => Err(Error::InvalidArgument(
                "gaussian-unknown-variance requires sigma2".into(),
            )),
            (_, None) => Ok(None),
            (_, Some(_)) => Err(Error::InvalidArgument(
                "sigma2 is only accepted for gaussian-unknown-variance".into(),
            )),
        }
    }

    fn effective_sigma2(&self, sigma2: Option<f64>) -> Option<f64> {
        match self.family {
            FamilyMember::GaussianFixed { sigma2 } => Some(sigma2),
            FamilyMember::GaussianUnknown => sigma2,
            _ => None,
        }
    }

    /// Per-observation log density at linear predictor `eta`.
    pub fn log_density(&self, eta: f64, y: f64, sigma2: Option<f64>) -> Result<f64> {
        let sigma2 = self.check_sigma2(sigma2)?;
        self.log_density_unchecked(eta, y, sigma2)
    }

    fn log_density_unchecked(&self, eta: f64, y: f64, sigma2: Option<f64>) -> Result<f64> {
        match self.family {
            FamilyMember::Bernoulli => {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Data(format!(
                        "bernoulli response must be 0 or 1, got {y}"
                    )));
                }
                if self.link == LinkFunction::Logistic {
                    // ln g = -softplus(-eta), ln(1-g) = -softplus(eta)
                    Ok(-(y * softplus(-eta) + (1.0 - y) * softplus(eta)))
                } else {
                    let g = self.link.eval(eta);
                    Ok(y * g.ln() + (1.0 - y) * (1.0 - g).ln())
                }
            }
            FamilyMember::Poisson => {
                if y < 0.0 || y.fract() != 0.0 || !y.is_finite() {
                    return Err(Error::Data(format!(
                        "poisson response must be a non-negative integer, got {y}"
                    )));
                }
                let g = self.link.eval(eta);
                if g <= 0.0 {
                    return Err(Error::Domain(format!(
                        "poisson mean must be positive, got g({eta}) = {g}"
                    )));
                }
                Ok(-g + y * g.ln() - ln_factorial(y as u64))
            }
            FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown => {
                let s2 = self.effective_sigma2(sigma2).expect("checked above");
                let r = y - self.link.eval(eta);
                Ok(-0.5 * (2.0 * std::f64::consts::PI * s2).ln() - r * r / (2.0 * s2))
            }
        }
    }

    /// Sum of per-observation log densities.
    pub fn log_likelihood(&self, eta: &[f64], y: &[f64], sigma2: Option<f64>) -> Result<f64> {
        if eta.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "eta and y length mismatch: {} vs {}",
                eta.len(),
                y.len()
            )));
        }
        let sigma2 = self.check_sigma2(sigma2)?;
        let mut total = 0.0;
        for (&e, &yi) in eta.iter().zip(y.iter()) {
            total += self.log_density_unchecked(e, yi, sigma2)?;
        }
        Ok(total)
    }

    /// Derivative of the per-observation log density with respect to `eta`.
    ///
    /// For Bernoulli with the logistic link this is exactly `y - g(eta)`.
    pub fn score_eta(&self, eta: f64, y: f64, sigma2: Option<f64>) -> Result<f64> {
        let sigma2 = self.check_sigma2(sigma2)?;
        self.score_eta_unchecked(eta, y, sigma2)
    }

    fn score_eta_unchecked(&self, eta: f64, y: f64, sigma2: Option<f64>) -> Result<f64> {
        match self.family {
            FamilyMember::Bernoulli => {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Data(format!(
                        "bernoulli response must be 0 or 1, got {y}"
                    )));
                }
                let g = self.link.eval(eta);
                if self.link == LinkFunction::Logistic {
                    Ok(y - g)
                } else {
                    Ok((y / g - (1.0 - y) / (1.0 - g)) * self.link.deriv(eta))
                }
            }
            FamilyMember::Poisson => {
                let g = self.link.eval(eta);
                if g <= 0.0 {
                    return Err(Error::Domain(format!(
                        "poisson mean must be positive, got g({eta}) = {g}"
                    )));
                }
                Ok((y / g - 1.0) * self.link.deriv(eta))
            }
            FamilyMember::GaussianFixed { .. } | FamilyMember::GaussianUnknown => {
                let s2 = self.effective_sigma2(sigma2).expect("checked above");
                Ok((y - self.link.eval(eta)) * self.link.deriv(eta) / s2)
            }
        }
    }

    /// Score vector over a batch, reusing one allocation.
    pub fn scores(&self, eta: &[f64], y: &[f64], sigma2: Option<f64>) -> Result<Vec<f64>> {
        if eta.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "eta and y length mismatch: {} vs {}",
                eta.len(),
                y.len()
            )));
        }
        let sigma2 = self.check_sigma2(sigma2)?;
        eta.iter()
            .zip(y.iter())
            .map(|(&e, &yi)| self.score_eta_unchecked(e, yi, sigma2))
            .collect()
    }
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}
