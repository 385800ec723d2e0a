//! Stochastic variational inference with a Gaussian variational family.
//!
//! The KL objective (negative ELBO up to an additive constant) is estimated
//! by the reparameterization `beta = mu + F eps`, and the gradients with
//! respect to the mean and the covariance factor are analytic:
//!
//! * mean: `Sigma_{1:k}^+ beta - sum_i score(eta_i, y_i) x_i`
//! * factor: `-(entropy term) + (mean gradient) eps'`, projected onto the
//!   parameterization's free entries,
//!
//! where `score` is the derivative of the per-observation log density in the
//! linear predictor (for the logistic family exactly `y - g(eta)`). An
//! optional log-normal block over the noise variance handles the
//! two-parameter Gaussian model via `sigma2 = exp(m + s zeta)`.

mod adam;
mod factor;

pub use factor::{CovFactor, FactorGrad, FactorParam};

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::SplitData;
use crate::error::{Error, Result};
use crate::glm::{FamilyMember, GlmSpec};
use crate::prior::{standard_normal, SpectralPrior, VariancePrior};

use adam::Adam;

const LN_2PI: f64 = 1.8378770664093453;

/// Dimension above which the automatic factor choice switches from dense
/// lower-triangular to low-rank-plus-diagonal.
pub const DENSE_FACTOR_LIMIT: usize = 512;

/// Log-normal variational block over the noise variance:
/// `sigma2 = exp(location + scale * zeta)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VarianceBlock {
    pub location: f64,
    pub scale: f64,
}

impl VarianceBlock {
    pub fn sigma2(&self, zeta: f64) -> f64 {
        (self.location + self.scale * zeta).exp()
    }

    /// Posterior mean of `sigma2` under the log-normal block.
    pub fn mean_sigma2(&self) -> f64 {
        (self.location + 0.5 * self.scale * self.scale).exp()
    }
}

/// The object the optimizer updates: variational mean, covariance factor,
/// and the optional variance block.
#[derive(Clone, Debug)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    pub factor: CovFactor,
    pub variance_block: Option<VarianceBlock>,
}

impl VariationalState {
    /// Initial state: zero mean and a small isotropic factor; the low-rank
    /// block starts at the top prior eigenvectors scaled by sqrt(lambda).
    pub fn init(dim: usize, param: FactorParam, prior: &SpectralPrior) -> Self {
        let factor = match param {
            FactorParam::Dense => CovFactor::Dense(DMatrix::identity(dim, dim) * 0.1),
            FactorParam::Diagonal => CovFactor::Diagonal(DVector::from_element(dim, 0.1)),
            FactorParam::LowRank { rank } => {
                let lr = prior.low_rank();
                let avail = lr.eigenvectors().ncols();
                let mut block = DMatrix::zeros(dim, rank);
                for j in 0..rank.min(avail) {
                    let scale = 0.1 * lr.eigenvalues()[j].max(0.0).sqrt();
                    block
                        .column_mut(j)
                        .copy_from(&(lr.eigenvectors().column(j) * scale));
                }
                CovFactor::LowRankDiag {
                    low_rank: block,
                    diag: DVector::from_element(dim, 0.1),
                }
            }
        };
        VariationalState {
            mean: DVector::zeros(dim),
            factor,
            variance_block: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Hyperparameters of the stochastic optimization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    /// Monte Carlo samples per step.
    pub mc_samples: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Convergence tolerance on the smoothed objective.
    pub tolerance: f64,
    /// Iterations the smoothed objective must stay within tolerance.
    pub patience: usize,
    pub seed: u64,
    /// Factor parameterization; `None` selects dense for p <= 512 and
    /// low-rank(rank = prior k) + diagonal above.
    pub factor: Option<FactorParam>,
    /// Rows sampled per step; `None` is full batch.
    pub minibatch: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mc_samples: 1,
            max_iters: 5000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tolerance: 1e-5,
            patience: 50,
            seed: 0,
            factor: None,
            minibatch: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument(
                "mc_samples must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0,1), got {v}"
                )));
            }
        }
        if self.tolerance <= 0.0 || self.tolerance.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if let Some(b) = self.minibatch {
            if b == 0 {
                return Err(Error::InvalidArgument(
                    "minibatch size must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Outcome of a fit: final state plus the audit trail.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: VariationalState,
    /// Per-iteration stochastic objective values.
    pub trace: Vec<f64>,
    /// Per-iteration gradient infinity norms (same length as `trace`).
    pub grad_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: Duration,
}

/// `beta = mu + F eps`, deterministic in `(state, eps)`.
pub fn reparam_sample(state: &VariationalState, eps: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(&state.mean + state.factor.apply_eps(eps)?)
}

/// Joint gradient of the single-sample objective at fixed noise.
#[derive(Clone, Debug)]
pub struct JointGrad {
    pub mean: DVector<f64>,
    pub factor: FactorGrad,
    pub variance: Option<(f64, f64)>,
}

impl JointGrad {
    pub fn max_abs(&self) -> f64 {
        let mut m = self.mean.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        m = m.max(self.factor.max_abs());
        if let Some((a, b)) = self.variance {
            m = m.max(a.abs()).max(b.abs());
        }
        m
    }
}

struct Objective<'a> {
    x2: &'a DMatrix<f64>,
    y2: &'a DVector<f64>,
    spec: &'a GlmSpec,
    prior: &'a SpectralPrior,
    var_prior: Option<&'a VariancePrior>,
    /// Row subset and inverse sampling fraction for minibatching.
    rows: Option<&'a [usize]>,
    scale: f64,
}

impl<'a> Objective<'a> {
    fn full(
        x2: &'a DMatrix<f64>,
        y2: &'a DVector<f64>,
        spec: &'a GlmSpec,
        prior: &'a SpectralPrior,
        var_prior: Option<&'a VariancePrior>,
    ) -> Self {
        Objective {
            x2,
            y2,
            spec,
            prior,
            var_prior,
            rows: None,
            scale: 1.0,
        }
    }

    fn sigma2(&self, state: &VariationalState, zeta: Option<f64>) -> Result<Option<f64>> {
        if self.spec.family != FamilyMember::GaussianUnknown {
            return Ok(None);
        }
        let block = state.variance_block.ok_or_else(|| {
            Error::InvalidArgument(
                "gaussian-unknown-variance requires a variance block in the state".into(),
            )
        })?;
        let zeta = zeta.ok_or_else(|| {
            Error::InvalidArgument("gaussian-unknown-variance requires a zeta draw".into())
        })?;
        Ok(Some(block.sigma2(zeta)))
    }

    fn etas_and_labels(&self, beta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        match self.rows {
            None => {
                let etas = self.x2 * beta;
                (etas.as_slice().to_vec(), self.y2.as_slice().to_vec())
            }
            Some(rows) => {
                let mut etas = Vec::with_capacity(rows.len());
                let mut labels = Vec::with_capacity(rows.len());
                for &i in rows {
                    etas.push(self.x2.row(i).transpose().dot(beta));
                    labels.push(self.y2[i]);
                }
                (etas, labels)
            }
        }
    }

    fn value(
        &self,
        state: &VariationalState,
        eps: &DVector<f64>,
        zeta: Option<f64>,
    ) -> Result<f64> {
        let beta = reparam_sample(state, eps)?;
        let log_q_beta = -0.5 * eps.len() as f64 * LN_2PI
            - 0.5 * state.factor.log_det_cov()?
            - 0.5 * eps.norm_squared();
        let log_prior_beta =
            self.prior.log_normalizer_on_span() - 0.5 * self.prior.quadratic_form(&beta);
        let sigma2 = self.sigma2(state, zeta)?;
        let (etas, labels) = self.etas_and_labels(&beta);
        let loglik = self.scale * self.spec.log_likelihood(&etas, &labels, sigma2)?;

        let mut value = log_q_beta - log_prior_beta - loglik;
        if let Some(s2) = sigma2 {
            let block = state.variance_block.expect("checked in sigma2()");
            let zeta = zeta.expect("checked in sigma2()");
            let log_q_sigma = -s2.ln() - block.scale.ln() - 0.5 * LN_2PI - 0.5 * zeta * zeta;
            let var_prior = self.var_prior.ok_or_else(|| {
                Error::InvalidArgument("two-parameter objective requires a variance prior".into())
            })?;
            value += log_q_sigma - var_prior.log_density(s2)?;
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite ({value}) at sampled beta with ||beta|| = {:.3e}",
                beta.norm()
            )));
        }
        Ok(value)
    }

    fn gradients(
        &self,
        state: &VariationalState,
        eps: &DVector<f64>,
        zeta: Option<f64>,
    ) -> Result<JointGrad> {
        let beta = reparam_sample(state, eps)?;
        let sigma2 = self.sigma2(state, zeta)?;
        let (etas, labels) = self.etas_and_labels(&beta);
        let scores = self.spec.scores(&etas, &labels, sigma2)?;

        // d(objective)/d(beta) = Sigma^+ beta - sum_i score_i x_i
        let mut g_beta = self.prior.pinv_apply(&beta);
        match self.rows {
            None => {
                let s = DVector::from_vec(scores.clone());
                g_beta -= self.x2.tr_mul(&s) * self.scale;
            }
            Some(rows) => {
                for (&i, &s) in rows.iter().zip(scores.iter()) {
                    g_beta -= self.x2.row(i).transpose() * (s * self.scale);
                }
            }
        }

        let factor = match (&state.factor, state.factor.entropy_grad()?) {
            (CovFactor::Dense(_), FactorGrad::Dense(ent)) => {
                let p = state.dim();
                let mut g = DMatrix::zeros(p, p);
                for i in 0..p {
                    for j in 0..=i {
                        g[(i, j)] = g_beta[i] * eps[j] - ent[(i, j)];
                    }
                }
                FactorGrad::Dense(g)
            }
            (CovFactor::Diagonal(_), FactorGrad::Diagonal(ent)) => {
                let g = DVector::from_iterator(
                    state.dim(),
                    (0..state.dim()).map(|i| g_beta[i] * eps[i] - ent[i]),
                );
                FactorGrad::Diagonal(g)
            }
            (
                CovFactor::LowRankDiag { low_rank, .. },
                FactorGrad::LowRankDiag {
                    low_rank: ent_lr,
                    diag: ent_d,
                },
            ) => {
                let p = state.dim();
                let r = low_rank.ncols();
                let mut g_lr = DMatrix::zeros(p, r);
                for a in 0..r {
                    for i in 0..p {
                        g_lr[(i, a)] = g_beta[i] * eps[a] - ent_lr[(i, a)];
                    }
                }
                let g_d =
                    DVector::from_iterator(p, (0..p).map(|i| g_beta[i] * eps[r + i] - ent_d[i]));
                FactorGrad::LowRankDiag {
                    low_rank: g_lr,
                    diag: g_d,
                }
            }
            _ => unreachable!("entropy gradient shape always matches the factor"),
        };

        let variance = match sigma2 {
            None => None,
            Some(s2) => {
                let block = state.variance_block.expect("checked in sigma2()");
                let zeta = zeta.expect("checked in sigma2()");
                let var_prior = self.var_prior.ok_or_else(|| {
                    Error::InvalidArgument(
                        "two-parameter objective requires a variance prior".into(),
                    )
                })?;
                // d(-loglik)/d(sigma2), with the minibatch scale applied
                let mut dneg_lik = 0.0;
                for (&eta, &y) in etas.iter().zip(labels.iter()) {
                    let r = y - self.spec.link.eval(eta);
                    dneg_lik -= -0.5 / s2 + r * r / (2.0 * s2 * s2);
                }
                dneg_lik *= self.scale;
                let dpen = -var_prior.grad_log_density(s2)? + dneg_lik;
                let d_location = -1.0 + dpen * s2;
                let d_scale = -zeta - 1.0 / block.scale + dpen * s2 * zeta;
                Some((d_location, d_scale))
            }
        };

        Ok(JointGrad {
            mean: g_beta,
            factor,
            variance,
        })
    }
}

/// Single-draw objective value, covering the optional variance block.
#[allow(clippy::too_many_arguments)]
pub fn kl_objective_joint(
    state: &VariationalState,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    var_prior: Option<&VariancePrior>,
    eps: &DVector<f64>,
    zeta: Option<f64>,
) -> Result<f64> {
    Objective::full(x2, y2, spec, prior, var_prior).value(state, eps, zeta)
}

/// Unbiased KL estimate (up to the dropped additive constant) averaged over
/// a batch of noise draws; one-parameter families.
pub fn kl_objective_estimate(
    state: &VariationalState,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    eps_batch: &[DVector<f64>],
) -> Result<f64> {
    if eps_batch.is_empty() {
        return Err(Error::InvalidArgument("eps batch must be non-empty".into()));
    }
    let obj = Objective::full(x2, y2, spec, prior, None);
    let mut total = 0.0;
    for (idx, eps) in eps_batch.iter().enumerate() {
        total += obj.value(state, eps, None).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} (eps sample {idx})")),
            other => other,
        })?;
    }
    Ok(total / eps_batch.len() as f64)
}

/// Joint analytic gradients of the single-draw objective at fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn grad_joint(
    state: &VariationalState,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    var_prior: Option<&VariancePrior>,
    eps: &DVector<f64>,
    zeta: Option<f64>,
) -> Result<JointGrad> {
    Objective::full(x2, y2, spec, prior, var_prior).gradients(state, eps, zeta)
}

/// Gradient of the objective with respect to the variational mean at fixed
/// `eps`: `Sigma_{1:k}^+ beta - sum_i score_i x_i`.
pub fn grad_mean(
    state: &VariationalState,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(grad_joint(state, x2, y2, spec, prior, None, eps, None)?.mean)
}

/// Gradient with respect to the covariance factor at fixed `eps`, projected
/// onto the parameterization's free entries.
pub fn grad_factor(
    state: &VariationalState,
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    eps: &DVector<f64>,
) -> Result<FactorGrad> {
    Ok(grad_joint(state, x2, y2, spec, prior, None, eps, None)?.factor)
}

// --- flat parameterization for the optimizer -------------------------------
//
// Positive quantities (factor diagonals, variance-block scale) are optimized
// through their logarithms so they stay valid without projection.

fn flat_len(state: &VariationalState) -> usize {
    let p = state.dim();
    let factor = match &state.factor {
        CovFactor::Dense(_) => p * (p + 1) / 2,
        CovFactor::Diagonal(_) => p,
        CovFactor::LowRankDiag { low_rank, .. } => p * low_rank.ncols() + p,
    };
    p + factor + if state.variance_block.is_some() { 2 } else { 0 }
}

fn flatten(state: &VariationalState, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(state.mean.as_slice());
    match &state.factor {
        CovFactor::Dense(l) => {
            for i in 0..l.nrows() {
                for j in 0..=i {
                    out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
                }
            }
        }
        CovFactor::Diagonal(d) => out.extend(d.iter().map(|v| v.ln())),
        CovFactor::LowRankDiag { low_rank, diag } => {
            out.extend_from_slice(low_rank.as_slice());
            out.extend(diag.iter().map(|v| v.ln()));
        }
    }
    if let Some(block) = state.variance_block {
        out.push(block.location);
        out.push(block.scale.ln());
    }
}

fn unflatten(raw: &[f64], template: &VariationalState) -> VariationalState {
    let p = template.dim();
    let mean = DVector::from_column_slice(&raw[..p]);
    let mut pos = p;
    let factor = match &template.factor {
        CovFactor::Dense(_) => {
            let mut l = DMatrix::zeros(p, p);
            for i in 0..p {
                for j in 0..=i {
                    l[(i, j)] = if i == j { raw[pos].exp() } else { raw[pos] };
                    pos += 1;
                }
            }
            CovFactor::Dense(l)
        }
        CovFactor::Diagonal(_) => {
            let d = DVector::from_iterator(p, raw[pos..pos + p].iter().map(|v| v.exp()));
            pos += p;
            CovFactor::Diagonal(d)
        }
        CovFactor::LowRankDiag { low_rank, .. } => {
            let r = low_rank.ncols();
            let block = DMatrix::from_column_slice(p, r, &raw[pos..pos + p * r]);
            pos += p * r;
            let d = DVector::from_iterator(p, raw[pos..pos + p].iter().map(|v| v.exp()));
            pos += p;
            CovFactor::LowRankDiag {
                low_rank: block,
                diag: d,
            }
        }
    };
    let variance_block = template.variance_block.map(|_| VarianceBlock {
        location: raw[pos],
        scale: raw[pos + 1].exp(),
    });
    VariationalState {
        mean,
        factor,
        variance_block,
    }
}

/// Chain rule from natural coordinates to the raw (log-reparameterized) ones.
fn flatten_grad(grad: &JointGrad, state: &VariationalState, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(grad.mean.as_slice());
    match (&grad.factor, &state.factor) {
        (FactorGrad::Dense(g), CovFactor::Dense(l)) => {
            for i in 0..l.nrows() {
                for j in 0..=i {
                    out.push(if i == j {
                        g[(i, j)] * l[(i, j)]
                    } else {
                        g[(i, j)]
                    });
                }
            }
        }
        (FactorGrad::Diagonal(g), CovFactor::Diagonal(d)) => {
            out.extend(g.iter().zip(d.iter()).map(|(g, d)| g * d));
        }
        (
            FactorGrad::LowRankDiag {
                low_rank: g_lr,
                diag: g_d,
            },
            CovFactor::LowRankDiag { diag, .. },
        ) => {
            out.extend_from_slice(g_lr.as_slice());
            out.extend(g_d.iter().zip(diag.iter()).map(|(g, d)| g * d));
        }
        _ => unreachable!("gradient shape always matches the factor"),
    }
    if let Some((d_loc, d_scale)) = grad.variance {
        let block = state
            .variance_block
            .expect("variance gradient implies a block");
        out.push(d_loc);
        out.push(d_scale * block.scale);
    }
}

fn accumulate(acc: &mut JointGrad, g: &JointGrad) {
    acc.mean += &g.mean;
    match (&mut acc.factor, &g.factor) {
        (FactorGrad::Dense(a), FactorGrad::Dense(b)) => *a += b,
        (FactorGrad::Diagonal(a), FactorGrad::Diagonal(b)) => *a += b,
        (
            FactorGrad::LowRankDiag {
                low_rank: a,
                diag: ad,
            },
            FactorGrad::LowRankDiag {
                low_rank: b,
                diag: bd,
            },
        ) => {
            *a += b;
            *ad += bd;
        }
        _ => unreachable!(),
    }
    if let (Some(av), Some(bv)) = (&mut acc.variance, &g.variance) {
        av.0 += bv.0;
        av.1 += bv.1;
    }
}

fn scale_grad(g: &mut JointGrad, c: f64) {
    g.mean *= c;
    match &mut g.factor {
        FactorGrad::Dense(m) => *m *= c,
        FactorGrad::Diagonal(d) => *d *= c,
        FactorGrad::LowRankDiag { low_rank, diag } => {
            *low_rank *= c;
            *diag *= c;
        }
    }
    if let Some(v) = &mut g.variance {
        v.0 *= c;
        v.1 *= c;
    }
}

fn resolve_factor(config: &FitConfig, dim: usize, prior: &SpectralPrior) -> FactorParam {
    let chosen = config.factor.unwrap_or({
        if dim <= DENSE_FACTOR_LIMIT {
            FactorParam::Dense
        } else {
            FactorParam::LowRank { rank: 0 }
        }
    });
    match chosen {
        // rank 0 defers to the prior truncation level
        FactorParam::LowRank { rank: 0 } => FactorParam::LowRank {
            rank: prior.low_rank().rank().min(dim),
        },
        other => other,
    }
}

fn run_fit(
    x2: &DMatrix<f64>,
    y2: &DVector<f64>,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    var_prior: Option<&VariancePrior>,
    config: &FitConfig,
    mut state: VariationalState,
) -> Result<FitResult> {
    config.validate()?;
    let start = Instant::now();
    let n = x2.nrows();
    let p = state.dim();
    if prior.dim() != p || x2.ncols() != p {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: state {p}, prior {}, covariates {}",
            prior.dim(),
            x2.ncols()
        )));
    }

    let mut raw = Vec::with_capacity(flat_len(&state));
    flatten(&state, &mut raw);
    let mut adam = Adam::new(
        raw.len(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eps_dim = state.factor.eps_dim();
    let two_parameter = var_prior.is_some();

    let mut trace = Vec::new();
    let mut grad_norms = Vec::new();
    let mut smoothed: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut raw_grad = Vec::with_capacity(raw.len());
    let mut batch_rows: Vec<usize> = Vec::new();

    for _iter in 0..config.max_iters {
        // minibatch rows for this step, if configured
        let rows: Option<&[usize]> = match config.minibatch {
            Some(b) if b < n => {
                sample_without_replacement(n, b, &mut rng, &mut batch_rows);
                Some(&batch_rows)
            }
            _ => None,
        };
        let scale = rows.map_or(1.0, |r| n as f64 / r.len() as f64);
        let objective = Objective {
            x2,
            y2,
            spec,
            prior,
            var_prior,
            rows,
            scale,
        };

        let mut value_acc = 0.0;
        let mut grad_acc: Option<JointGrad> = None;
        for _ in 0..config.mc_samples {
            let eps = DVector::from_fn(eps_dim, |_, _| standard_normal(&mut rng));
            let zeta = two_parameter.then(|| standard_normal(&mut rng));
            let value = objective.value(&state, &eps, zeta);
            let value = match value {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    return Err(Error::Divergence {
                        msg,
                        trace_prefix: trace.iter().copied().take(20).collect(),
                    })
                }
                Err(e) => return Err(e),
            };
            value_acc += value;
            let g = objective.gradients(&state, &eps, zeta)?;
            match &mut grad_acc {
                None => grad_acc = Some(g),
                Some(acc) => accumulate(acc, &g),
            }
        }
        let mut grad = grad_acc.expect("mc_samples >= 1");
        scale_grad(&mut grad, 1.0 / config.mc_samples as f64);
        let value = value_acc / config.mc_samples as f64;

        if !grad.max_abs().is_finite() {
            return Err(Error::Divergence {
                msg: "gradient is not finite".into(),
                trace_prefix: trace.iter().copied().take(20).collect(),
            });
        }

        trace.push(value);
        grad_norms.push(grad.max_abs());

        flatten_grad(&grad, &state, &mut raw_grad);
        adam.step(&mut raw, &raw_grad);
        state = unflatten(&raw, &state);

        // exponentially smoothed objective for the stopping rule
        let s = match smoothed.last() {
            None => value,
            Some(prev) => 0.9 * prev + 0.1 * value,
        };
        smoothed.push(s);
        if smoothed.len() > config.patience {
            let past = smoothed[smoothed.len() - 1 - config.patience];
            if (s - past).abs() < config.tolerance {
                converged = true;
                break;
            }
        }
    }

    let iterations = trace.len();
    Ok(FitResult {
        state,
        trace,
        grad_norms,
        iterations,
        converged,
        wall_time: start.elapsed(),
    })
}

fn sample_without_replacement<R: Rng>(n: usize, b: usize, rng: &mut R, out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..n);
    for i in 0..b {
        let j = i + (rng.random::<u64>() as usize) % (n - i);
        out.swap(i, j);
    }
    out.truncate(b);
}

/// Fit the one-parameter model by stochastic variational inference.
pub fn fit(
    data: &SplitData,
    spec: &GlmSpec,
    prior: &SpectralPrior,
    config: &FitConfig,
) -> Result<FitResult> {
    if data.d2_x.nrows() == 0 {
        return Err(Error::DegenerateInput(
            "likelihood block D2 is empty".into(),
        ));
    }
    if spec.family == FamilyMember::GaussianUnknown {
        return Err(Error::InvalidArgument(
            "gaussian-unknown-variance requires fit_two_parameter".into(),
        ));
    }
    let p = data.d2_x.ncols();
    let param = resolve_factor(config, p, prior);
    let state = VariationalState::init(p, param, prior);
    run_fit(&data.d2_x, &data.d2_y, spec, prior, None, config, state)
}

/// Fit the two-parameter Gaussian model: the coefficient block as in [`fit`]
/// plus a log-normal variational block over the noise variance.
pub fn fit_two_parameter(
    data: &SplitData,
    spec: &GlmSpec,
    priors: (&SpectralPrior, &VariancePrior),
    config: &FitConfig,
) -> Result<FitResult> {
    if spec.family != FamilyMember::GaussianUnknown {
        return Err(Error::InvalidArgument(
            "fit_two_parameter requires the gaussian-unknown-variance family".into(),
        ));
    }
    if data.d2_x.nrows() == 0 {
        return Err(Error::DegenerateInput(
            "likelihood block D2 is empty".into(),
        ));
    }
    let (prior, var_prior) = priors;
    let p = data.d2_x.ncols();
    let param = resolve_factor(config, p, prior);
    let mut state = VariationalState::init(p, param, prior);
    state.variance_block = Some(VarianceBlock {
        location: 0.0,
        scale: 0.1,
    });
    run_fit(
        &data.d2_x,
        &data.d2_y,
        spec,
        prior,
        Some(var_prior),
        config,
        state,
    )
}

/// MAP and posterior-mean point estimates. Under the Gaussian variational
/// family both equal the variational mean; a mean outside the truncation
/// ball is projected back onto the sphere of radius `radius`.
pub fn point_estimates(result: &FitResult, radius: f64) -> (DVector<f64>, DVector<f64>) {
    let estimate = project_to_ball(&result.state.mean, radius);
    (estimate.clone(), estimate)
}

pub fn project_to_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm > radius {
        v * (radius / norm)
    } else {
        v.clone()
    }
}
