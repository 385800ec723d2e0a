//! Finite-difference verification battery for every analytic gradient: the
//! variational mean and factor gradients (all three parameterizations), the
//! variance block, the per-observation score, and the prior gradients.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::glm::{FamilyMember, GlmSpec, LinkFunction};
use crate::prior::{standard_normal, SpectralPrior, VariancePrior};
use crate::spectral::{empirical_covariance, spectral_decompose, truncate};
use crate::vi::{
    grad_joint, kl_objective_joint, CovFactor, FactorGrad, FactorParam, VarianceBlock,
    VariationalState,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Randomized instances per check.
    pub instances: usize,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Test hook: corrupt one analytic gradient so the harness must fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 20,
            tolerance: 1e-5,
            corrupt: false,
        }
    }
}

/// Worst observed relative error for one named check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub pass: bool,
    /// Seed that reproduces the worst instance.
    pub worst_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckReport>,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let denom = fd.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    analytic
        .iter()
        .zip(fd.iter())
        .fold(0.0_f64, |a, (&g, &f)| a.max((g - f).abs()))
        / denom
}

struct Instance {
    x2: DMatrix<f64>,
    y2: DVector<f64>,
    spec: GlmSpec,
    prior: SpectralPrior,
    var_prior: Option<VariancePrior>,
    state: VariationalState,
    eps: DVector<f64>,
    zeta: Option<f64>,
}

fn make_prior(p: usize, k: usize, rng: &mut ChaCha8Rng) -> SpectralPrior {
    let rows = p + 4;
    let x1 = DMatrix::from_fn(rows, p, |_, _| standard_normal(rng));
    let cov = empirical_covariance(&x1, 2 * rows).expect("valid block");
    let spectrum = spectral_decompose(&cov).expect("symmetric");
    let lr = truncate(&spectrum, k).expect("k in range");
    SpectralPrior::new(lr, 1e6).expect("positive radius")
}

fn make_factor(p: usize, param: FactorParam, rng: &mut ChaCha8Rng) -> CovFactor {
    match param {
        FactorParam::Dense => {
            let mut l = DMatrix::zeros(p, p);
            for i in 0..p {
                for j in 0..i {
                    l[(i, j)] = 0.3 * (rng.random::<f64>() - 0.5);
                }
                l[(i, i)] = 0.5 + rng.random::<f64>();
            }
            CovFactor::Dense(l)
        }
        FactorParam::Diagonal => {
            CovFactor::Diagonal(DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>()))
        }
        FactorParam::LowRank { rank } => CovFactor::LowRankDiag {
            low_rank: DMatrix::from_fn(p, rank, |_, _| 0.4 * (rng.random::<f64>() - 0.5)),
            diag: DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>()),
        },
    }
}

fn make_instance(seed: u64, param: FactorParam, two_parameter: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + (rng.random::<u64>() % 50) as usize;
    let p = 2 + (rng.random::<u64>() % 19) as usize;
    let k = 1 + (rng.random::<u64>() % p.min(10) as u64) as usize;

    let spec = if two_parameter {
        GlmSpec::new(LinkFunction::Softplus, FamilyMember::GaussianUnknown).unwrap()
    } else {
        match rng.random::<u64>() % 4 {
            0 => GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli).unwrap(),
            1 => GlmSpec::new(LinkFunction::Softplus, FamilyMember::gaussian()).unwrap(),
            2 => GlmSpec::new(LinkFunction::Identity, FamilyMember::gaussian()).unwrap(),
            _ => GlmSpec::new(LinkFunction::Softplus, FamilyMember::Poisson).unwrap(),
        }
    };

    let x2 = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng) / (p as f64).sqrt());
    let y2 = DVector::from_fn(n, |_, _| match spec.family {
        FamilyMember::Bernoulli => (rng.random::<u64>() % 2) as f64,
        FamilyMember::Poisson => (rng.random::<u64>() % 6) as f64,
        _ => standard_normal(&mut rng),
    });

    let prior = make_prior(p, k, &mut rng);
    let param = match param {
        FactorParam::LowRank { .. } => FactorParam::LowRank { rank: k },
        other => other,
    };
    let mut state = VariationalState {
        mean: DVector::from_fn(p, |_, _| 0.3 * standard_normal(&mut rng)),
        factor: make_factor(p, param, &mut rng),
        variance_block: None,
    };
    let eps = DVector::from_fn(state.factor.eps_dim(), |_, _| standard_normal(&mut rng));
    let zeta = if two_parameter {
        state.variance_block = Some(VarianceBlock {
            location: 0.4 * (rng.random::<f64>() - 0.5),
            scale: 0.1 + 0.4 * rng.random::<f64>(),
        });
        Some(standard_normal(&mut rng))
    } else {
        None
    };
    Instance {
        x2,
        y2,
        spec,
        prior,
        var_prior: two_parameter.then(|| VariancePrior::new(1.0, 1.0).unwrap()),
        state,
        eps,
        zeta,
    }
}

impl Instance {
    fn objective(&self, state: &VariationalState) -> f64 {
        kl_objective_joint(
            state,
            &self.x2,
            &self.y2,
            &self.spec,
            &self.prior,
            self.var_prior.as_ref(),
            &self.eps,
            self.zeta,
        )
        .expect("objective finite on interior instances")
    }

    fn gradients(&self) -> crate::vi::JointGrad {
        grad_joint(
            &self.state,
            &self.x2,
            &self.y2,
            &self.spec,
            &self.prior,
            self.var_prior.as_ref(),
            &self.eps,
            self.zeta,
        )
        .expect("gradients finite on interior instances")
    }

    fn fd_mean(&self) -> Vec<f64> {
        let p = self.state.dim();
        let mut fd = Vec::with_capacity(p);
        for i in 0..p {
            let mut plus = self.state.clone();
            plus.mean[i] += FD_STEP;
            let mut minus = self.state.clone();
            minus.mean[i] -= FD_STEP;
            fd.push((self.objective(&plus) - self.objective(&minus)) / (2.0 * FD_STEP));
        }
        fd
    }

    fn fd_factor(&self) -> Vec<f64> {
        let count = factor_entry_count(&self.state.factor);
        let mut fd = Vec::with_capacity(count);
        for idx in 0..count {
            let mut plus = self.state.clone();
            plus.factor = perturb_factor(&self.state.factor, idx, FD_STEP);
            let mut minus = self.state.clone();
            minus.factor = perturb_factor(&self.state.factor, idx, -FD_STEP);
            fd.push((self.objective(&plus) - self.objective(&minus)) / (2.0 * FD_STEP));
        }
        fd
    }

    fn fd_variance(&self) -> Vec<f64> {
        let block = self.state.variance_block.expect("two-parameter instance");
        let mut fd = Vec::with_capacity(2);
        for which in 0..2 {
            let mut plus = self.state.clone();
            let mut minus = self.state.clone();
            let mut bp = block;
            let mut bm = block;
            if which == 0 {
                bp.location += FD_STEP;
                bm.location -= FD_STEP;
            } else {
                bp.scale += FD_STEP;
                bm.scale -= FD_STEP;
            }
            plus.variance_block = Some(bp);
            minus.variance_block = Some(bm);
            fd.push((self.objective(&plus) - self.objective(&minus)) / (2.0 * FD_STEP));
        }
        fd
    }
}

fn factor_entry_count(f: &CovFactor) -> usize {
    match f {
        CovFactor::Dense(l) => l.nrows() * (l.nrows() + 1) / 2,
        CovFactor::Diagonal(d) => d.len(),
        CovFactor::LowRankDiag { low_rank, diag } => low_rank.len() + diag.len(),
    }
}

fn perturb_factor(f: &CovFactor, idx: usize, delta: f64) -> CovFactor {
    let mut out = f.clone();
    match &mut out {
        CovFactor::Dense(l) => {
            let mut pos = 0;
            'outer: for i in 0..l.nrows() {
                for j in 0..=i {
                    if pos == idx {
                        l[(i, j)] += delta;
                        break 'outer;
                    }
                    pos += 1;
                }
            }
        }
        CovFactor::Diagonal(d) => d[idx] += delta,
        CovFactor::LowRankDiag { low_rank, diag } => {
            if idx < low_rank.len() {
                low_rank.as_mut_slice()[idx] += delta;
            } else {
                diag[idx - low_rank.len()] += delta;
            }
        }
    }
    out
}

fn factor_grad_entries(g: &FactorGrad) -> Vec<f64> {
    match g {
        FactorGrad::Dense(m) => {
            let mut out = Vec::with_capacity(m.nrows() * (m.nrows() + 1) / 2);
            for i in 0..m.nrows() {
                for j in 0..=i {
                    out.push(m[(i, j)]);
                }
            }
            out
        }
        FactorGrad::Diagonal(d) => d.as_slice().to_vec(),
        FactorGrad::LowRankDiag { low_rank, diag } => {
            let mut out = low_rank.as_slice().to_vec();
            out.extend_from_slice(diag.as_slice());
            out
        }
    }
}

fn run_check(
    name: &str,
    config: &GradCheckConfig,
    seed_offset: u64,
    mut body: impl FnMut(u64) -> f64,
) -> CheckReport {
    let mut worst = 0.0_f64;
    let mut worst_seed = 0;
    for i in 0..config.instances {
        let seed = config
            .seed
            .wrapping_add(seed_offset)
            .wrapping_add(i as u64 * 7919);
        let err = body(seed);
        if err > worst {
            worst = err;
            worst_seed = seed;
        }
    }
    CheckReport {
        name: name.to_string(),
        instances: config.instances,
        worst_rel_err: worst,
        pass: worst < config.tolerance,
        worst_seed,
    }
}

/// Run the full battery. Deterministic given the config seed.
pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    let factor_params = [
        ("dense", FactorParam::Dense),
        ("diagonal", FactorParam::Diagonal),
        ("lowrank", FactorParam::LowRank { rank: 0 }),
    ];

    for (tag, param) in factor_params {
        let corrupt = config.corrupt && tag == "dense";
        checks.push(run_check(
            &format!("grad_mean[{tag}]"),
            config,
            1000,
            |seed| {
                let inst = make_instance(seed, param, false);
                let mut analytic = inst.gradients().mean.as_slice().to_vec();
                if corrupt {
                    analytic[0] += 1e-2;
                }
                rel_err(&analytic, &inst.fd_mean())
            },
        ));
    }

    for (tag, param) in factor_params {
        checks.push(run_check(
            &format!("grad_factor[{tag}]"),
            config,
            2000,
            |seed| {
                let inst = make_instance(seed, param, false);
                let analytic = factor_grad_entries(&inst.gradients().factor);
                rel_err(&analytic, &inst.fd_factor())
            },
        ));
    }

    checks.push(run_check("grad_variance_block", config, 3000, |seed| {
        let inst = make_instance(seed, FactorParam::Diagonal, true);
        let (d_loc, d_scale) = inst.gradients().variance.expect("two-parameter");
        rel_err(&[d_loc, d_scale], &inst.fd_variance())
    }));

    checks.push(run_check("score_eta", config, 4000, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            (
                GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli).unwrap(),
                None,
            ),
            (
                GlmSpec::new(LinkFunction::Softplus, FamilyMember::gaussian()).unwrap(),
                None,
            ),
            (
                GlmSpec::new(LinkFunction::Softplus, FamilyMember::Poisson).unwrap(),
                None,
            ),
            (
                GlmSpec::new(LinkFunction::Identity, FamilyMember::GaussianUnknown).unwrap(),
                Some(0.5 + rng.random::<f64>()),
            ),
        ];
        let mut worst = 0.0_f64;
        for (spec, s2) in specs {
            for _ in 0..5 {
                let eta = 3.0 * (rng.random::<f64>() - 0.5);
                let y = match spec.family {
                    FamilyMember::Bernoulli => (rng.random::<u64>() % 2) as f64,
                    FamilyMember::Poisson => (rng.random::<u64>() % 5) as f64,
                    _ => standard_normal(&mut rng),
                };
                let an = spec.score_eta(eta, y, s2).unwrap();
                let fd = (spec.log_density(eta + FD_STEP, y, s2).unwrap()
                    - spec.log_density(eta - FD_STEP, y, s2).unwrap())
                    / (2.0 * FD_STEP);
                worst = worst.max(rel_err(&[an], &[fd]));
            }
        }
        worst
    }));

    checks.push(run_check("grad_log_prior_beta", config, 5000, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 2 + (rng.random::<u64>() % 19) as usize;
        let k = 1 + (rng.random::<u64>() % p.min(10) as u64) as usize;
        let prior = make_prior(p, k, &mut rng);
        let beta = DVector::from_fn(p, |_, _| 0.5 * standard_normal(&mut rng));
        let analytic = prior.grad_log_density(&beta).unwrap();
        let mut fd = Vec::with_capacity(p);
        for i in 0..p {
            let mut plus = beta.clone();
            plus[i] += FD_STEP;
            let mut minus = beta.clone();
            minus[i] -= FD_STEP;
            fd.push(
                (prior.log_density(&plus).unwrap() - prior.log_density(&minus).unwrap())
                    / (2.0 * FD_STEP),
            );
        }
        rel_err(analytic.as_slice(), &fd)
    }));

    checks.push(run_check("grad_log_prior_sigma2", config, 6000, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vp = VariancePrior::new(0.5 + rng.random::<f64>(), 0.5 + rng.random::<f64>()).unwrap();
        let mut worst = 0.0_f64;
        for _ in 0..5 {
            let s2 = 0.2 + 3.0 * rng.random::<f64>();
            let an = vp.grad_log_density(s2).unwrap();
            let fd = (vp.log_density(s2 + FD_STEP).unwrap()
                - vp.log_density(s2 - FD_STEP).unwrap())
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(&[an], &[fd]));
        }
        worst
    }));

    let pass = checks.iter().all(|c| c.pass);
    Ok(GradCheckReport { checks, pass })
}
