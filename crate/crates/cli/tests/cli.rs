use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rgseq::evaluator::{exact_oc, ExactOptions};
use rgseq::io::ModelFile;
use rgseq::test_rules::TestRule;
use rgseq::threshold_solver::stationary_design;
use rgseq::value_iteration::{DesignParams, FixedPointOptions, GridSpec};
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn model(name: &str) -> String {
    root().join("models").join(name).display().to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rgseq-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn rgseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgseq")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: stdout {:?} stderr {}", out.stdout, String::from_utf8_lossy(&out.stderr))
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn design_matches_library_thresholds() {
    let dir = scratch("design");
    let rule_path = dir.join("rule.json");
    let out = rgseq(&[
        "design", "--model", &model("bernoulli.json"), "--lambda0", "5", "--lambda1", "5", "--c", "0.02",
        "--rule-out", rule_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    let th = &report["thresholds"];
    let (a, b) = (th["A"].as_f64().unwrap(), th["B"].as_f64().unwrap());
    assert!(0.0 < a && a < 1.0 && 1.0 < b && b.is_finite());
    assert!(th["residual_a"].as_f64().unwrap() < 1e-8 && th["residual_b"].as_f64().unwrap() < 1e-8);
    assert_eq!(report["config"]["model"]["c"], 0.02);

    let m = ModelFile::load(model("bernoulli.json")).unwrap().resolve().unwrap().with_mean_cost(0.02).unwrap();
    let p = DesignParams::new(5.0, 5.0).unwrap();
    let (_, lib) = stationary_design(m.kernels.tail(), &p, &GridSpec::default(), &FixedPointOptions::default()).unwrap();
    let lib = lib.unwrap();
    assert_eq!((a, b), (lib.a, lib.b));

    let rule: TestRule = serde_json::from_value(read_json(&rule_path)).unwrap();
    assert_eq!(rule.tail_thresholds(), Some((a, b)));
}

#[test]
fn design_is_reproducible() {
    let args = ["design", "--model", &model("bernoulli_groups.json"), "--lambda0", "30", "--lambda1", "10"];
    let (first, second) = (rgseq(&args), rgseq(&args));
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn inverse_design_round_trip() {
    let out = rgseq(&["design", "--model", &model("bernoulli.json"), "--A", "0.1111", "--B", "9"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    let inv = &report["inverse"];
    assert!(inv["residual_lower"].as_f64().unwrap() < 1e-9);
    assert!(inv["residual_upper"].as_f64().unwrap() < 1e-9);
    let th = &report["thresholds"];
    assert!((th["A"].as_f64().unwrap() / 0.1111 - 1.0).abs() < 1e-6);
    assert!((th["B"].as_f64().unwrap() / 9.0 - 1.0).abs() < 1e-6);
    assert_eq!(report["lambda1"], 1.0);
}

#[test]
fn truncated_design() {
    let out = rgseq(&["design", "--model", &model("bernoulli.json"), "--lambda0", "20", "--lambda1", "20", "--horizon", "3"]);
    assert_eq!(code(&out), 0);
    let report = json(&out);
    assert_eq!(report["rule"]["kind"], "truncated");
    assert_eq!(report["rule"]["horizon"], 3);
}

#[test]
fn trivial_design_is_a_warning() {
    let out = rgseq(&["design", "--model", &model("bernoulli.json"), "--lambda0", "0.5", "--lambda1", "0.5"]);
    assert_eq!(code(&out), 0);
    let report = json(&out);
    assert_eq!(report["trivial"], true);
    assert_eq!(report["rule"]["horizon"], 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trivial"));
}

#[test]
fn config_errors_exit_2_without_outputs() {
    let dir = scratch("config");
    let rule_path = dir.join("rule.json");
    let report_path = dir.join("report.json");
    let out = rgseq(&[
        "design", "--model", "/nonexistent/model.json", "--lambda0", "3",
        "--rule-out", rule_path.to_str().unwrap(), "--out", report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!rule_path.exists() && !report_path.exists());

    let bad = dir.join("bad.json");
    let text = std::fs::read_to_string(model("bernoulli.json")).unwrap().replace("0.7, 0.3]", "0.6, 0.3]");
    assert!(text.contains("0.6, 0.3]"));
    std::fs::write(&bad, text).unwrap();
    assert_eq!(code(&rgseq(&["verify", "--model", bad.to_str().unwrap()])), 2);

    assert_eq!(code(&rgseq(&["design", "--model", &model("bernoulli.json")])), 2);
    assert_eq!(code(&rgseq(&["design", "--model", &model("bernoulli.json"), "--lambda0", "-1"])), 2);
    assert_eq!(code(&rgseq(&["frontier", "--model", &model("bernoulli.json"), "--alpha", "1.5", "--beta", "0.1"])), 2);
}

#[test]
fn solver_failure_exits_3() {
    let out = rgseq(&["design", "--model", &model("bernoulli.json"), "--lambda0", "20", "--lambda1", "20", "--max-iter", "2"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
}

#[test]
fn evaluate_wald_band_against_ruin_probabilities() {
    let dir = scratch("evaluate");
    let csv_path = dir.join("tail.csv");
    let rule = root().join("rules/bernoulli_wald.json");
    let out = rgseq(&[
        "evaluate", "--model", &model("bernoulli.json"), "--rule", rule.to_str().unwrap(),
        "--lambda0", "20", "--lambda1", "20", "--tail-csv", csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let r = json(&out);
    // log z moves by +-ln(7/3); the band (1/9, 9) is left after 3 net steps
    let ruin = |p: f64| {
        let q = (1.0 - p) / p;
        (1.0 - q.powi(3)) / (1.0 - q.powi(6))
    };
    assert!((r["alpha"].as_f64().unwrap() - ruin(0.3)).abs() < 1e-10);
    assert!((r["beta"].as_f64().unwrap() - (1.0 - ruin(0.7))).abs() < 1e-10);
    let l = r["K0"].as_f64().unwrap() + 20.0 * (r["alpha"].as_f64().unwrap() + r["beta"].as_f64().unwrap());
    assert!((r["lagrangian"].as_f64().unwrap() - l).abs() < 1e-12);
    let csv = std::fs::read_to_string(csv_path).unwrap();
    assert!(csv.starts_with("k,p0_tau_ge_k,p1_tau_ge_k\n1,1,1\n"));
}

#[test]
fn simulate_is_seeded_and_consistent() {
    let rule_path = root().join("rules/bernoulli_wald.json");
    let rule_arg = rule_path.to_str().unwrap();
    let args = ["simulate", "--model", &model("bernoulli.json"), "--rule", rule_arg, "--reps", "20000", "--seed", "99"];
    let (a, b) = (rgseq(&args), rgseq(&args));
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let r = json(&a);
    assert_eq!(r["seed"], 99);
    let m = ModelFile::load(model("bernoulli.json")).unwrap().resolve().unwrap();
    let rule: TestRule = serde_json::from_value(read_json(&rule_path)).unwrap();
    let oc = exact_oc(&rule, &m.kernels, &ExactOptions::default()).unwrap();
    for (key, exact) in [("alpha", oc.alpha), ("beta", oc.beta), ("K0", oc.k0), ("E_tau_1", oc.e_tau1)] {
        let est = r[key].as_f64().unwrap();
        let se = r["std_errors"][key].as_f64().unwrap();
        assert!((est - exact).abs() <= 4.0 * se, "{key}: {est} vs {exact} (se {se})");
    }

    let one = rgseq(&["simulate", "--model", &model("bernoulli.json"), "--rule", rule_arg, "--reps", "1", "--hypothesis", "h0"]);
    assert_eq!(code(&one), 0);
    let r = json(&one);
    assert!(r["std_errors"]["alpha"].is_null() && r["beta"].is_null());
}

#[test]
fn value_dump_of_counterexample() {
    let dir = scratch("dump");
    let path = dir.join("values.csv");
    let out = rgseq(&[
        "value-dump", "--model", &model("uniform_counterexample.json"), "--lambda0", "2", "--lambda1", "1",
        "--out", path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["z", "g", "rho", "rho_bar", "continue_flag"]);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = rec.iter().map(|s| s.parse().unwrap()).collect();
        assert!((v[2] - v[0].min(2.0)).abs() < 1e-8 && (v[3] - v[0].min(1.0)).abs() < 1e-8);
        assert_eq!(v[4], 0.0);
        rows += 1;
    }
    assert!(rows > 1000);
}

#[test]
fn verify_bundled_models() {
    for name in ["bernoulli.json", "uniform_counterexample.json"] {
        let out = rgseq(&["verify", "--model", &model(name), "--reps", "20000"]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let r = json(&out);
        assert_eq!(r["passed"], true);
        assert!(r["checks"].as_array().unwrap().len() > 20);
    }
    let r = json(&rgseq(&["verify", "--model", &model("uniform_counterexample.json"), "--reps", "0"]));
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"never_stops_under_h1") && names.contains(&"upper_threshold_existence"));
}

#[test]
fn verify_reports_failures_with_exit_1() {
    let out = rgseq(&["verify", "--model", &model("bernoulli.json"), "--tol", "1e-3", "--reps", "0"]);
    assert_eq!(code(&out), 1);
    assert_eq!(json(&out)["passed"], false);
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}

#[test]
fn frontier_meets_targets() {
    let dir = scratch("frontier");
    let rule_path = dir.join("rule.json");
    let out = rgseq(&[
        "frontier", "--model", &model("bernoulli.json"), "--alpha", "0.05", "--beta", "0.05",
        "--rule-out", rule_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["status"], "met");
    let m = ModelFile::load(model("bernoulli.json")).unwrap().resolve().unwrap();
    let rule: TestRule = serde_json::from_value(read_json(&rule_path)).unwrap();
    let oc = exact_oc(&rule, &m.kernels, &ExactOptions::default()).unwrap();
    assert!(oc.alpha <= 0.05 && oc.beta <= 0.05 && oc.terminated[0] && oc.terminated[1]);
    assert_eq!(r["alpha"].as_f64().unwrap(), oc.alpha);
}

#[test]
fn frontier_vacuous_and_unattainable_targets() {
    let out = rgseq(&["frontier", "--model", &model("bernoulli.json"), "--alpha", "0.999", "--beta", "0.999"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["probes"], 1);

    let out = rgseq(&["frontier", "--model", &model("bernoulli.json"), "--c", "1e9", "--alpha", "0.05", "--beta", "0.05"]);
    assert_eq!(code(&out), 4);
    let r = json(&out);
    assert_eq!(r["status"], "best_effort");
    assert_eq!(r["design"]["trivial"], true);
}
