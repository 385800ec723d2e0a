//! The sample-size sweep: simulate, fit, and evaluate over a grid of n with
//! several replications each, in parallel, emitting one CSV row per fitted
//! replication plus per-(method, n) aggregates with 5%/95% bands.
//!
//! All randomness derives from per-replication seeds, so results do not
//! depend on the parallel schedule. Wall times go to a separate file because
//! they are the one nondeterministic output.

use std::time::Instant;

use esglm::datagen::{gen_pair, p_for_n, Dataset};
use esglm::error::{Error, Result};
use esglm::eval::{excess_risk_point, MetricsReport};
use esglm::glm::FamilyMember;
use esglm::pipeline::fit_pipeline;
use rayon::prelude::*;

use crate::commands::{
    evaluate_model, parse_preset, pcr_metrics, pipeline_config, write_run_config,
};
use crate::config::{RunConfig, SweepConfig};
use crate::output::atomic_write;

#[derive(Clone, Debug)]
pub struct SweepRecord {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub rep: usize,
    pub status: String,
    pub metrics: Option<MetricsReport>,
    pub wall_secs: f64,
}

fn rep_seed(base: u64, n: usize, rep: usize) -> u64 {
    base.wrapping_add((n as u64) << 24).wrapping_add(rep as u64)
}

fn run_one_rep(cfg: &SweepConfig, n: usize, rep: usize) -> Vec<SweepRecord> {
    let (kind, dist) = match parse_preset(&cfg.preset) {
        Ok(v) => v,
        Err(e) => {
            return vec![SweepRecord {
                method: "es".into(),
                n,
                p: 0,
                seed: 0,
                rep,
                status: format!("error: {e}"),
                metrics: None,
                wall_secs: 0.0,
            }]
        }
    };
    let p = p_for_n(n);
    let seed = rep_seed(cfg.seed, n, rep);
    let mut records = Vec::new();

    let pair = gen_pair(kind, dist, n, p, cfg.test_n, seed);
    let (train, test) = match pair {
        Ok(v) => v,
        Err(e) => {
            for method in &cfg.methods {
                records.push(SweepRecord {
                    method: method.clone(),
                    n,
                    p,
                    seed,
                    rep,
                    status: format!("error: {e}"),
                    metrics: None,
                    wall_secs: 0.0,
                });
            }
            return records;
        }
    };

    for method in &cfg.methods {
        let start = Instant::now();
        let outcome = match method.as_str() {
            "es" => es_metrics(cfg, &train, &test, seed),
            "pcr" => {
                let family = train.family;
                pcr_metrics(&train, &test, family, 5, 30, seed.wrapping_add(7)).map(|(m, _, _)| m)
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep method `{other}` (expected es|pcr)"
            ))),
        };
        let wall_secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(metrics) => records.push(SweepRecord {
                method: method.clone(),
                n,
                p,
                seed,
                rep,
                status: "ok".into(),
                metrics: Some(metrics),
                wall_secs,
            }),
            Err(e) => records.push(SweepRecord {
                method: method.clone(),
                n,
                p,
                seed,
                rep,
                status: format!("error: {e}"),
                metrics: None,
                wall_secs,
            }),
        }
    }
    records
}

fn es_metrics(
    cfg: &SweepConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<MetricsReport> {
    let pipeline = pipeline_config(&cfg.model, seed)?;
    let (model, _results) = fit_pipeline(train, &pipeline)?;
    let mut report = evaluate_model(
        &model,
        test,
        cfg.m,
        cfg.level,
        cfg.threshold,
        seed.wrapping_add(3),
    )?;
    if let Some(beta) = &test.true_beta {
        report.excess_risk = Some(excess_risk_point(
            &model.point_estimate(),
            &model.spec,
            beta,
            &test.x,
        ));
    }
    Ok(report)
}

fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut text = String::from("method,n,p,seed,rep,status,");
    text.push_str(&MetricsReport::CSV_COLUMNS.join(","));
    text.push('\n');
    for r in records {
        let metric_cells = match &r.metrics {
            Some(m) => m.csv_values().join(","),
            None => vec![""; MetricsReport::CSV_COLUMNS.len()].join(","),
        };
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.n, r.p, r.seed, r.rep, r.status, metric_cells
        ));
    }
    text
}

fn timings_csv(records: &[SweepRecord]) -> String {
    let mut text = String::from("method,n,p,seed,rep,wall_secs\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.method, r.n, r.p, r.seed, r.rep, r.wall_secs
        ));
    }
    text
}

/// Nearest-rank quantile of a non-empty sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn aggregate_csv(records: &[SweepRecord], methods: &[String], grid: &[usize]) -> String {
    let metric_of = |m: &MetricsReport, name: &str| -> Option<f64> {
        match name {
            "zero_one_loss" => m.zero_one_loss,
            "auc" => m.auc,
            "um" => m.um,
            "cc" => m.cc,
            "rmse" => m.rmse,
            "cp" => m.cp,
            "al" => m.al,
            "excess_risk" => m.excess_risk,
            _ => None,
        }
    };
    let metric_names = [
        "zero_one_loss",
        "auc",
        "um",
        "cc",
        "rmse",
        "cp",
        "al",
        "excess_risk",
    ];
    let mut text = String::from("method,n,metric,count,mean,q05,q95\n");
    for method in methods {
        for &n in grid {
            for name in metric_names {
                let mut values: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.method == method && r.n == n)
                    .filter_map(|r| r.metrics.as_ref().and_then(|m| metric_of(m, name)))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                values.sort_by(f64::total_cmp);
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                text.push_str(&format!(
                    "{method},{n},{name},{},{:.16e},{:.16e},{:.16e}\n",
                    values.len(),
                    mean,
                    quantile(&values, 0.05),
                    quantile(&values, 0.95),
                ));
            }
        }
    }
    text
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<()> {
    if cfg.grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument(
            "sweep needs at least one replication".into(),
        ));
    }
    for method in &cfg.methods {
        if method != "es" && method != "pcr" {
            return Err(Error::InvalidArgument(format!(
                "unknown sweep method `{method}` (expected es|pcr)"
            )));
        }
        if method == "pcr"
            && parse_preset(&cfg.preset)?.0.glm_spec()?.family == FamilyMember::GaussianUnknown
        {
            return Err(Error::InvalidArgument(
                "PCR baseline does not support the two-parameter family".into(),
            ));
        }
    }
    parse_preset(&cfg.preset)?;

    let tasks: Vec<(usize, usize)> = cfg
        .grid
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |rep| (n, rep)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.unwrap_or(0)) // 0 = rayon default (logical cores)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records: Vec<SweepRecord> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map(|&(n, rep)| run_one_rep(cfg, n, rep))
            .collect()
    });
    records.sort_by(|a, b| (&a.method, a.n, a.seed, a.rep).cmp(&(&b.method, b.n, b.seed, b.rep)));

    write_run_config(&cfg.out, &RunConfig::Sweep(cfg.clone()))?;
    atomic_write(&cfg.out.join("sweep.csv"), sweep_csv(&records).as_bytes())?;
    atomic_write(
        &cfg.out.join("aggregate.csv"),
        aggregate_csv(&records, &cfg.methods, &cfg.grid).as_bytes(),
    )?;
    atomic_write(
        &cfg.out.join("timings.csv"),
        timings_csv(&records).as_bytes(),
    )?;

    let failures = records.iter().filter(|r| r.status != "ok").count();
    println!(
        "sweep complete: {} records ({} failed) -> {}",
        records.len(),
        failures,
        cfg.out.display()
    );
    Ok(())
}
