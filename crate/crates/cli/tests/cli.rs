//! End-to-end tests of the `esglm` binary: file outputs, exit codes,
//! determinism, atomicity.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esglm::datagen::{write_csv, Dataset};
use esglm::eval::MetricsReport;
use esglm::glm::{FamilyMember, GlmSpec, LinkFunction};
use esglm::pipeline::{FitEntry, FittedModel};
use esglm::vi::{CovFactor, VariationalState};
use nalgebra::{DMatrix, DVector};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_esglm")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("esglm_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(bin())
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn simulate_writes_expected_files_and_is_reproducible() {
    let dir = fresh_dir("simulate");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "simulate",
            "--preset",
            "logistic-gaussian",
            "--n",
            "50",
            "--test-n",
            "40",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&r);
    }
    // identical parameters yield byte-identical data regardless of out path
    for name in ["train.csv", "test.csv", "meta.json"] {
        assert_eq!(
            read(&out_a.join(name)),
            read(&out_b.join(name)),
            "{name} differs between identical runs"
        );
    }
    let meta: serde_json::Value = serde_json::from_slice(&read(&out_a.join("meta.json"))).unwrap();
    assert_eq!(meta["n"], 50);
    assert_eq!(meta["p"], 184); // floor(50^{4/3})
    assert!(meta["true_beta_digest"].as_str().unwrap().len() == 16);

    // train.csv has n data rows and p+1 columns
    let text = String::from_utf8(read(&out_a.join("train.csv"))).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 185);
    assert_eq!(lines.count(), 50);
}

#[test]
fn fit_then_evaluate_round_trip() {
    let dir = fresh_dir("fit_eval");
    let sim = dir.join("sim");
    assert_success(&run(&[
        "simulate",
        "--preset",
        "logistic-gaussian",
        "--n",
        "50",
        "--test-n",
        "200",
        "--seed",
        "3",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let fit = dir.join("fit");
    assert_success(&run(&[
        "fit",
        "--train",
        sim.join("train.csv").to_str().unwrap(),
        "--family",
        "bernoulli",
        "--link",
        "logistic",
        "--iters",
        "300",
        "--seed",
        "5",
        "--out",
        fit.to_str().unwrap(),
    ]));
    assert!(fit.join("model.json").exists());
    let trace = String::from_utf8(read(&fit.join("trace.csv"))).unwrap();
    assert!(trace.starts_with("role,iteration,objective,grad_norm"));
    assert_eq!(trace.lines().count(), 301); // header + 300 iterations

    let eval = dir.join("eval");
    assert_success(&run(&[
        "evaluate",
        "--model",
        fit.join("model.json").to_str().unwrap(),
        "--test",
        sim.join("test.csv").to_str().unwrap(),
        "--m",
        "100",
        "--seed",
        "2",
        "--out",
        eval.to_str().unwrap(),
    ]));
    // the emitted JSON parses against the report schema
    let report: MetricsReport = serde_json::from_slice(&read(&eval.join("metrics.json"))).unwrap();
    assert!(report.zero_one_loss.is_some());
    let c = &report.counts;
    assert_eq!(c.n_test, 200);
    assert_eq!(
        c.n_misclassified,
        c.n_unconfident_misclassified + c.n_confident_misclassified
    );
}

#[test]
fn missing_dataset_exits_one_with_no_partial_outputs() {
    let dir = fresh_dir("missing_data");
    let out = dir.join("fit");
    let r = run(&[
        "fit",
        "--train",
        dir.join("nope.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists(), "failure must not create outputs");
}

#[test]
fn usage_errors_exit_one() {
    let r = run(&["fit", "--no-such-flag"]);
    assert_eq!(r.status.code(), Some(1));
    let r = run(&[
        "simulate",
        "--preset",
        "bogus",
        "--n",
        "10",
        "--out",
        "/tmp/x_esglm_bogus",
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn perfect_model_fixture_scores_perfectly() {
    let dir = fresh_dir("perfect");
    // deterministic labels from a known coefficient vector
    let beta = DVector::from_vec(vec![1.2, -0.8, 0.5]);
    let x = DMatrix::from_fn(60, 3, |i, j| ((i * 13 + j * 29) % 17) as f64 / 8.5 - 1.0);
    let spec = GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli).unwrap();
    let y = DVector::from_iterator(
        60,
        (&x * &beta).iter().map(|&eta| {
            if spec.predict_mean(eta) > 0.5 {
                1.0
            } else {
                0.0
            }
        }),
    );
    let test = Dataset::new(x, y, FamilyMember::Bernoulli).unwrap();
    let mut csv = Vec::new();
    write_csv(&test, &mut csv).unwrap();
    fs::write(dir.join("test.csv"), &csv).unwrap();

    // a model concentrated at the true coefficients
    let model = FittedModel {
        spec,
        entries: vec![FitEntry {
            state: VariationalState {
                mean: beta,
                factor: CovFactor::Diagonal(DVector::from_element(3, 1e-9)),
                variance_block: None,
            },
            radius: 1e9,
            k: 3,
            swapped: false,
        }],
        centering: None,
        prior_eta: 1.0,
        prior_xi: 1.0,
    };
    fs::write(dir.join("model.json"), model.to_json().unwrap()).unwrap();

    let out = dir.join("eval");
    assert_success(&run(&[
        "evaluate",
        "--model",
        dir.join("model.json").to_str().unwrap(),
        "--test",
        dir.join("test.csv").to_str().unwrap(),
        "--m",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]));
    let report: MetricsReport = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(report.zero_one_loss, Some(0.0));
    assert_eq!(report.auc, Some(1.0));
}

#[test]
fn family_test_mismatch_is_a_validation_error() {
    let dir = fresh_dir("mismatch");
    // classification model vs continuous response
    let model = FittedModel {
        spec: GlmSpec::new(LinkFunction::Logistic, FamilyMember::Bernoulli).unwrap(),
        entries: vec![FitEntry {
            state: VariationalState {
                mean: DVector::from_vec(vec![1.0, 1.0]),
                factor: CovFactor::Diagonal(DVector::from_element(2, 0.1)),
                variance_block: None,
            },
            radius: 1e9,
            k: 2,
            swapped: false,
        }],
        centering: None,
        prior_eta: 1.0,
        prior_xi: 1.0,
    };
    fs::write(dir.join("model.json"), model.to_json().unwrap()).unwrap();
    fs::write(dir.join("test.csv"), "x1,x2,y\n1.0,2.0,3.5\n0.0,1.0,0.2\n").unwrap();
    let out = dir.join("eval");
    let r = run(&[
        "evaluate",
        "--model",
        dir.join("model.json").to_str().unwrap(),
        "--test",
        dir.join("test.csv").to_str().unwrap(),
        "--m",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.join("metrics.json").exists());
}

#[test]
fn swap_average_model_averages_both_roles() {
    let dir = fresh_dir("swap");
    let sim = dir.join("sim");
    assert_success(&run(&[
        "simulate",
        "--preset",
        "logistic-gaussian",
        "--n",
        "40",
        "--p",
        "20",
        "--test-n",
        "40",
        "--seed",
        "6",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let fit = dir.join("fit");
    assert_success(&run(&[
        "fit",
        "--train",
        sim.join("train.csv").to_str().unwrap(),
        "--iters",
        "200",
        "--swap-average",
        "--seed",
        "8",
        "--out",
        fit.to_str().unwrap(),
    ]));
    let model =
        FittedModel::from_json(&String::from_utf8(read(&fit.join("model.json"))).unwrap()).unwrap();
    assert_eq!(model.entries.len(), 2);
    assert!(model.entries[1].swapped);
    let avg = (&model.entries[0].state.mean + &model.entries[1].state.mean) / 2.0;
    // radii are large, so projection is inactive and the point estimate is
    // exactly the coordinatewise average
    assert!((model.point_estimate() - avg).norm() < 1e-12);
}

#[test]
fn gradcheck_exit_codes_and_determinism() {
    let ok = run(&["gradcheck", "--instances", "5", "--seed", "4"]);
    assert_eq!(ok.status.code(), Some(0));
    let again = run(&["gradcheck", "--instances", "5", "--seed", "4"]);
    assert_eq!(
        String::from_utf8_lossy(&ok.stdout),
        String::from_utf8_lossy(&again.stdout),
        "fixed seed must reproduce identical worst errors"
    );
    let bad = run(&["gradcheck", "--instances", "5", "--seed", "4", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn sweep_counts_and_schedule_independence() {
    let dir = fresh_dir("sweep");
    let args_for = |out: &Path, jobs: &str| {
        vec![
            "sweep".to_string(),
            "--preset".into(),
            "logistic-gaussian".into(),
            "--grid".into(),
            "24,32".into(),
            "--reps".into(),
            "2".into(),
            "--test-n".into(),
            "60".into(),
            "--iters".into(),
            "120".into(),
            "--m".into(),
            "60".into(),
            "--seed".into(),
            "21".into(),
            "--jobs".into(),
            jobs.into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let serial = dir.join("serial");
    let parallel = dir.join("parallel");
    let r1 = Command::new(bin())
        .args(args_for(&serial, "1"))
        .output()
        .unwrap();
    assert_success(&r1);
    let r2 = Command::new(bin())
        .args(args_for(&parallel, "4"))
        .output()
        .unwrap();
    assert_success(&r2);

    let sweep_text = String::from_utf8(read(&serial.join("sweep.csv"))).unwrap();
    // header + 2 grid x 2 reps x 2 methods
    assert_eq!(sweep_text.lines().count(), 9);
    assert_eq!(
        read(&serial.join("sweep.csv")),
        read(&parallel.join("sweep.csv")),
        "parallelism must not change emitted numbers"
    );
    assert_eq!(
        read(&serial.join("aggregate.csv")),
        read(&parallel.join("aggregate.csv"))
    );
    let agg = String::from_utf8(read(&serial.join("aggregate.csv"))).unwrap();
    // per (method, n): loss/auc/um/cc for es (+ excess risk) and loss/auc for pcr
    assert!(agg.lines().count() > 1 + 2 * 2 * 2);
}

#[test]
fn rerun_reproduces_outputs_bit_exactly() {
    let dir = fresh_dir("rerun");
    let sim = dir.join("sim");
    assert_success(&run(&[
        "simulate",
        "--preset",
        "softplus-gaussian",
        "--n",
        "30",
        "--p",
        "12",
        "--test-n",
        "50",
        "--seed",
        "13",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let train = read(&sim.join("train.csv"));
    let test = read(&sim.join("test.csv"));

    // replay from the persisted config into the same directory
    assert_success(&run(&[
        "rerun",
        "--config",
        sim.join("run_config.json").to_str().unwrap(),
    ]));
    assert_eq!(train, read(&sim.join("train.csv")));
    assert_eq!(test, read(&sim.join("test.csv")));

    // the same holds one level up: fit outputs
    let fit = dir.join("fit");
    assert_success(&run(&[
        "fit",
        "--train",
        sim.join("train.csv").to_str().unwrap(),
        "--family",
        "gaussian",
        "--link",
        "softplus",
        "--iters",
        "150",
        "--seed",
        "2",
        "--out",
        fit.to_str().unwrap(),
    ]));
    let model = read(&fit.join("model.json"));
    let trace = read(&fit.join("trace.csv"));
    assert_success(&run(&[
        "rerun",
        "--config",
        fit.join("run_config.json").to_str().unwrap(),
    ]));
    assert_eq!(model, read(&fit.join("model.json")));
    assert_eq!(trace, read(&fit.join("trace.csv")));
}

#[test]
fn interrupted_write_leaves_no_final_or_stray_files() {
    let dir = fresh_dir("fault");
    let out = dir.join("sim");
    let r = run_env(
        &[
            "simulate",
            "--preset",
            "logistic-gaussian",
            "--n",
            "20",
            "--p",
            "8",
            "--test-n",
            "20",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        "ESGLM_FAIL_AFTER_TEMP",
        "1",
    );
    assert!(!r.status.success());
    // the directory may exist, but no final artifact may
    for name in ["train.csv", "test.csv", "meta.json", "run_config.json"] {
        assert!(!out.join(name).exists(), "{name} must not exist");
    }
    if out.exists() {
        let leftovers: Vec<_> = fs::read_dir(&out).unwrap().collect();
        assert!(leftovers.is_empty(), "stray files: {leftovers:?}");
    }
}

#[test]
fn baseline_pcr_emits_metrics_schema() {
    let dir = fresh_dir("pcr");
    let sim = dir.join("sim");
    assert_success(&run(&[
        "simulate",
        "--preset",
        "logistic-gaussian",
        "--n",
        "60",
        "--p",
        "15",
        "--test-n",
        "80",
        "--seed",
        "2",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let out = dir.join("pcr");
    assert_success(&run(&[
        "baseline",
        "pcr",
        "--train",
        sim.join("train.csv").to_str().unwrap(),
        "--test",
        sim.join("test.csv").to_str().unwrap(),
        "--family",
        "bernoulli",
        "--grid-max",
        "10",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let report: MetricsReport = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    assert!(report.zero_one_loss.is_some());
    assert!(report.auc.is_some());
    assert!(report.cp.is_none());
    let pcr: serde_json::Value = serde_json::from_slice(&read(&out.join("pcr.json"))).unwrap();
    assert!(pcr["components"].as_u64().unwrap() >= 1);
}

#[test]
fn divergent_fit_exits_two_with_no_outputs() {
    let dir = fresh_dir("diverge");
    let sim = dir.join("sim");
    assert_success(&run(&[
        "simulate",
        "--preset",
        "logistic-gaussian",
        "--n",
        "30",
        "--p",
        "10",
        "--test-n",
        "20",
        "--seed",
        "2",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let out = dir.join("fit");
    let r = run(&[
        "fit",
        "--train",
        sim.join("train.csv").to_str().unwrap(),
        "--iters",
        "2000",
        "--lr",
        "1e12",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
    assert!(!out.join("model.json").exists());
}
