//! Posterior predictive summaries and the evaluation metrics: 0-1 loss, AUC,
//! unconfident-misclassification and confident-correct rates, RMSE, interval
//! coverage, and average interval length.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::GlmSpec;
use crate::prior::standard_normal;
use crate::vi::{reparam_sample, VariationalState};

/// Per-test-point Monte Carlo summary of the predictive mean `g(x'beta)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mc_mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Interval does not cross the classification threshold. Only meaningful
    /// when a threshold applies; metrics recompute it from the endpoints.
    pub confident: bool,
}

/// Sample counts behind every reported ratio.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n_test: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_misclassified: usize,
    pub n_confident: usize,
    pub n_confident_correct: usize,
    pub n_confident_misclassified: usize,
    pub n_unconfident_misclassified: usize,
    pub n_covered: usize,
}

/// Task-dependent metric set; absent metrics are `None`, never 0/0.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub zero_one_loss: Option<f64>,
    pub auc: Option<f64>,
    pub um: Option<f64>,
    pub cc: Option<f64>,
    pub rmse: Option<f64>,
    pub cp: Option<f64>,
    pub al: Option<f64>,
    pub excess_risk: Option<f64>,
    pub counts: MetricCounts,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 10] = [
        "zero_one_loss",
        "auc",
        "um",
        "cc",
        "rmse",
        "cp",
        "al",
        "excess_risk",
        "n_test",
        "n_confident",
    ];

    /// Values aligned with [`Self::CSV_COLUMNS`]; absent metrics are empty.
    pub fn csv_values(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        vec![
            f(self.zero_one_loss),
            f(self.auc),
            f(self.um),
            f(self.cc),
            f(self.rmse),
            f(self.cp),
            f(self.al),
            f(self.excess_risk),
            self.counts.n_test.to_string(),
            self.counts.n_confident.to_string(),
        ]
    }
}

/// `m` Monte Carlo draws of `g(x'beta)` with `beta ~ q`. For the
/// two-parameter model these are mean-function draws: observation noise is
/// excluded.
pub fn predictive_samples<R: Rng + ?Sized>(
    state: &VariationalState,
    spec: &GlmSpec,
    x_test: &DVector<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least one predictive sample".into(),
        ));
    }
    let eps_dim = state.factor.eps_dim();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let eps = DVector::from_fn(eps_dim, |_, _| standard_normal(rng));
        let beta = reparam_sample(state, &eps)?;
        out.push(spec.predict_mean(x_test.dot(&beta)));
    }
    Ok(out)
}

/// Empirical `(alpha/2, 1 - alpha/2)` quantiles by the nearest-rank rule.
pub fn interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "interval level must lie in (0,1), got {level}"
        )));
    }
    let m = samples.len();
    let alpha = 1.0 - level;
    let min_m = (2.0 / alpha).ceil() as usize;
    if m < min_m {
        return Err(Error::InvalidArgument(format!(
            "{m} samples are too few for level {level} (need at least {min_m})"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank_lower = ((m as f64 * alpha / 2.0).ceil() as usize).max(1);
    let rank_upper = ((m as f64 * (1.0 - alpha / 2.0)).ceil() as usize).min(m);
    Ok((sorted[rank_lower - 1], sorted[rank_upper - 1]))
}

/// Build a predictive summary for one test point.
pub fn summarize<R: Rng + ?Sized>(
    state: &VariationalState,
    spec: &GlmSpec,
    x_test: &DVector<f64>,
    m: usize,
    level: f64,
    threshold: Option<f64>,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    let samples = predictive_samples(state, spec, x_test, m, rng)?;
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

/// Midrank AUC: equals `(concordant + ties/2) / (positives * negatives)`.
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // midrank for the tie group spanning sorted positions i..=j (0-based)
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Classification metrics: 0-1 loss, AUC over the Monte Carlo mean scores,
/// and the interval-based confidence accounting.
pub fn classification_metrics(
    summaries: &[PredictiveSummary],
    y_true: &[f64],
    threshold: f64,
) -> Result<MetricsReport> {
    if summaries.len() != y_true.len() {
        return Err(Error::InvalidArgument(format!(
            "{} summaries vs {} labels",
            summaries.len(),
            y_true.len()
        )));
    }
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no test points".into()));
    }
    if let Some(&y) = y_true.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("labels must be 0 or 1, got {y}")));
    }

    let mut counts = MetricCounts {
        n_test: summaries.len(),
        ..Default::default()
    };
    for (s, &y) in summaries.iter().zip(y_true.iter()) {
        if y == 1.0 {
            counts.n_positive += 1;
        } else {
            counts.n_negative += 1;
        }
        let predicted = if s.mc_mean > threshold { 1.0 } else { 0.0 };
        let wrong = predicted != y;
        let confident = s.lower > threshold || s.upper < threshold;
        if wrong {
            counts.n_misclassified += 1;
        }
        if confident {
            counts.n_confident += 1;
            if wrong {
                counts.n_confident_misclassified += 1;
            } else {
                counts.n_confident_correct += 1;
            }
        } else if wrong {
            counts.n_unconfident_misclassified += 1;
        }
    }

    let scores: Vec<f64> = summaries.iter().map(|s| s.mc_mean).collect();
    let n = counts.n_test as f64;
    Ok(MetricsReport {
        zero_one_loss: Some(counts.n_misclassified as f64 / n),
        auc: auc(&scores, y_true),
        um: (counts.n_misclassified > 0)
            .then(|| counts.n_unconfident_misclassified as f64 / counts.n_misclassified as f64),
        cc: (counts.n_confident > 0)
            .then(|| counts.n_confident_correct as f64 / counts.n_confident as f64),
        counts,
        ..Default::default()
    })
}

/// Regression metrics against the noiseless mean values: RMSE, coverage of
/// the intervals, and average interval length.
pub fn regression_metrics(
    summaries: &[PredictiveSummary],
    g_true: &[f64],
) -> Result<MetricsReport> {
    if summaries.len() != g_true.len() {
        return Err(Error::InvalidArgument(format!(
            "{} summaries vs {} true values",
            summaries.len(),
            g_true.len()
        )));
    }
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no test points".into()));
    }
    let mut counts = MetricCounts {
        n_test: summaries.len(),
        ..Default::default()
    };
    let mut sq = 0.0;
    let mut len_sum = 0.0;
    for (s, &g) in summaries.iter().zip(g_true.iter()) {
        sq += (s.mc_mean - g) * (s.mc_mean - g);
        if s.lower <= g && g <= s.upper {
            counts.n_covered += 1;
        }
        len_sum += s.upper - s.lower;
    }
    let n = counts.n_test as f64;
    Ok(MetricsReport {
        rmse: Some((sq / n).sqrt()),
        cp: Some(counts.n_covered as f64 / n),
        al: Some(len_sum / n),
        counts,
        ..Default::default()
    })
}

/// Empirical L2(P_X) distance between the fitted mean function at the point
/// estimate and the oracle: `sqrt(mean_i (g(x_i' mu) - g(x_i' beta*))^2)`.
pub fn excess_risk(
    state: &VariationalState,
    spec: &GlmSpec,
    true_beta: &DVector<f64>,
    x_test: &DMatrix<f64>,
) -> f64 {
    excess_risk_point(&state.mean, spec, true_beta, x_test)
}

/// Same distance for an explicit point estimate (e.g. a swap-averaged mean).
pub fn excess_risk_point(
    estimate: &DVector<f64>,
    spec: &GlmSpec,
    true_beta: &DVector<f64>,
    x_test: &DMatrix<f64>,
) -> f64 {
    let eta_hat = x_test * estimate;
    let eta_star = x_test * true_beta;
    let m = x_test.nrows() as f64;
    let sq: f64 = eta_hat
        .iter()
        .zip(eta_star.iter())
        .map(|(&a, &b)| {
            let d = spec.predict_mean(a) - spec.predict_mean(b);
            d * d
        })
        .sum();
    (sq / m).sqrt()
}
