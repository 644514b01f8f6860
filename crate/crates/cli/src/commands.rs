use std::fs::File;
use std::io::Write;
use std::path::Path;

use rgseq::error::Error;
use rgseq::evaluator::{exact_oc, lagrangian, simulate, ExactOptions, Hypothesis, OperatingCharacteristics, SimulationOptions, SimulationRun};
use rgseq::test_rules::TestRule;
use rgseq::threshold_solver::{
    design_from_thresholds, solve_thresholds, stationary_design, stopping_gap, InverseDesign, RhoCache,
};
use rgseq::value_iteration::{g, DesignParams, FixedPointOptions};
use rgseq::verify::{run_invariant_suite, Check, VerifyConfig};
use serde::Serialize;

use crate::args::{DesignArgs, EvaluateArgs, HypothesisArg, SimulateArgs, ValueDumpArgs, VerifyArgs};
use crate::pipeline::{design_rule, fixed_point_options, from_solution, grid_spec, load_model, rule_options, Designed};

/// Non-zero exit with a message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NotAPmf(_)
            | Error::IndistinguishableHypotheses
            | Error::ZeroCost { .. }
            | Error::InvalidParameter(_)
            | Error::InvalidHorizon(_)
            | Error::BadThresholds { .. }
            | Error::Parse(_) => 2,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
    BestEffort,
}

pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure { code: 3, message: e.to_string() })?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Failure::config(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_csv(path: Option<&Path>, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), Failure> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(File::create(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Failure::config(e.to_string());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::config(e.to_string()))
}

pub fn load_rule(path: &Path) -> Result<TestRule, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn tail_rows<'a>(h0: &'a [f64], h1: &'a [f64]) -> impl Iterator<Item = Vec<String>> + 'a {
    let n = h0.len().max(h1.len());
    let cell = |v: &[f64], k: usize| v.get(k).map(|x| x.to_string()).unwrap_or_default();
    (0..n).map(move |k| vec![(k + 1).to_string(), cell(h0, k), cell(h1, k)])
}

#[derive(Serialize)]
struct DesignReport<'a> {
    command: &'static str,
    config: &'a DesignArgs,
    #[serde(flatten)]
    design: &'a Designed,
    #[serde(skip_serializing_if = "Option::is_none")]
    inverse: Option<InverseDesign>,
}

/// Fixed-point settings for the inverse design; its nested bisections need
/// tighter solves than a single design.
fn inverse_options(fp: &FixedPointOptions) -> FixedPointOptions {
    FixedPointOptions { tol: fp.tol.min(1e-12), max_iter: fp.max_iter.max(100_000) }
}

pub fn design(args: &DesignArgs) -> Result<Outcome, Failure> {
    let model = load_model(&args.model)?;
    let spec = grid_spec(&args.grid, &model)?;
    let fp = fixed_point_options(&args.grid)?;
    let opts = rule_options(&args.shape);
    let (designed, inverse) = match (args.a, args.b, args.lambda0) {
        (Some(a), Some(b), _) => {
            if args.model.c.is_some() {
                return Err(Failure::config("--c cannot be combined with --A/--B: the inverse design solves for c"));
            }
            if !model.kernels.is_stationary() {
                return Err(Failure::config("inverse design needs a stationary group-size law"));
            }
            let cache = RhoCache::new(model.kernels.tail().clone(), spec, inverse_options(&fp));
            let inv = design_from_thresholds(a, b, &cache)?;
            let sol = cache.solve(inv.c, inv.lambda)?;
            let th = solve_thresholds(&sol);
            let mut designed = from_solution(&sol, th, &opts)?;
            designed.warnings.push(format!(
                "costs are in units of lambda1 = 1: scale the model so the mean group cost is {}",
                inv.c
            ));
            (designed, Some(inv))
        }
        (_, _, Some(l0)) => {
            let params = DesignParams::new(l0, args.lambda1)?;
            (design_rule(&model, &params, &spec, &fp, &opts, args.horizon)?, None)
        }
        _ => return Err(Failure::config("give either --lambda0 or both --A and --B")),
    };
    for w in &designed.warnings {
        eprintln!("warning: {w}");
    }
    let report = DesignReport { command: "design", config: args, design: &designed, inverse };
    if let Some(path) = &args.rule_out {
        write_json(&designed.rule, Some(path))?;
    }
    write_json(&report, args.out.as_deref())?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    command: &'static str,
    config: &'a EvaluateArgs,
    #[serde(flatten)]
    oc: &'a OperatingCharacteristics,
    #[serde(skip_serializing_if = "Option::is_none")]
    lagrangian: Option<f64>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Outcome, Failure> {
    let model = load_model(&args.model)?;
    let rule = load_rule(&args.rule)?;
    let params = match (args.lambda0, args.lambda1) {
        (Some(l0), Some(l1)) => Some(DesignParams::new(l0, l1)?),
        _ => None,
    };
    let opts = ExactOptions { cap: args.cap, mass_tol: args.mass_tol, ..Default::default() };
    let oc = exact_oc(&rule, &model.kernels, &opts)?;
    if !(oc.terminated[0] && oc.terminated[1]) {
        eprintln!(
            "warning: mass left at the cap (H0 {:e}, H1 {:e}); costs and E tau are lower bounds",
            oc.truncation_mass[0], oc.truncation_mass[1]
        );
    }
    let report = EvaluateReport {
        command: "evaluate",
        config: args,
        oc: &oc,
        lagrangian: params.map(|p| lagrangian(&oc, &p)),
    };
    if let Some(path) = &args.tail_csv {
        write_csv(Some(path), &["k", "p0_tau_ge_k", "p1_tau_ge_k"], tail_rows(&oc.tail.h0, &oc.tail.h1))?;
    }
    write_json(&report, args.out.as_deref())?;
    Ok(Outcome::Success)
}

#[derive(Serialize, Default)]
struct StdErrors {
    alpha: Option<f64>,
    beta: Option<f64>,
    #[serde(rename = "K0")]
    k0: Option<f64>,
    #[serde(rename = "K1")]
    k1: Option<f64>,
    #[serde(rename = "E_tau_0")]
    e_tau0: Option<f64>,
    #[serde(rename = "E_tau_1")]
    e_tau1: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    command: &'static str,
    config: &'a SimulateArgs,
    seed: u64,
    reps: usize,
    alpha: Option<f64>,
    beta: Option<f64>,
    #[serde(rename = "K0")]
    k0: Option<f64>,
    #[serde(rename = "K1")]
    k1: Option<f64>,
    #[serde(rename = "E_tau_0")]
    e_tau0: Option<f64>,
    #[serde(rename = "E_tau_1")]
    e_tau1: Option<f64>,
    /// Fraction of replications censored at the cap, per hypothesis.
    truncation_mass: [Option<f64>; 2],
    std_errors: StdErrors,
    runs: Vec<SimulationRun>,
}

pub fn simulate_cmd(args: &SimulateArgs) -> Result<Outcome, Failure> {
    let model = load_model(&args.model)?;
    let rule = load_rule(&args.rule)?;
    let opts = SimulationOptions { reps: args.reps, seed: args.seed, cap: args.cap };
    let run = |h| simulate(&rule, &model.model, &model.groups, &model.cost, h, &opts);
    let h0 = matches!(args.hypothesis, HypothesisArg::H0 | HypothesisArg::Both).then(|| run(Hypothesis::H0)).transpose()?;
    let h1 = matches!(args.hypothesis, HypothesisArg::H1 | HypothesisArg::Both).then(|| run(Hypothesis::H1)).transpose()?;
    let censored = |r: &Option<SimulationRun>| r.as_ref().map(|r| r.cap_hits as f64 / r.reps as f64);
    let report = SimulateReport {
        command: "simulate",
        config: args,
        seed: args.seed,
        reps: args.reps,
        alpha: h0.as_ref().map(|r| r.reject_rate),
        beta: h1.as_ref().map(|r| r.accept_rate),
        k0: h0.as_ref().map(|r| r.mean_cost),
        k1: h1.as_ref().map(|r| r.mean_cost),
        e_tau0: h0.as_ref().map(|r| r.mean_tau),
        e_tau1: h1.as_ref().map(|r| r.mean_tau),
        truncation_mass: [censored(&h0), censored(&h1)],
        std_errors: StdErrors {
            alpha: h0.as_ref().and_then(|r| r.reject_rate_se),
            beta: h1.as_ref().and_then(|r| r.accept_rate_se),
            k0: h0.as_ref().and_then(|r| r.mean_cost_se),
            k1: h1.as_ref().and_then(|r| r.mean_cost_se),
            e_tau0: h0.as_ref().and_then(|r| r.mean_tau_se),
            e_tau1: h1.as_ref().and_then(|r| r.mean_tau_se),
        },
        runs: h0.iter().chain(h1.iter()).cloned().collect(),
    };
    if let Some(path) = &args.tail_csv {
        let t0 = h0.as_ref().map(|r| r.tail.as_slice()).unwrap_or(&[]);
        let t1 = h1.as_ref().map(|r| r.tail.as_slice()).unwrap_or(&[]);
        write_csv(Some(path), &["k", "p0_tau_ge_k", "p1_tau_ge_k"], tail_rows(t0, t1))?;
    }
    write_json(&report, args.out.as_deref())?;
    Ok(Outcome::Success)
}

pub fn value_dump(args: &ValueDumpArgs) -> Result<Outcome, Failure> {
    let model = load_model(&args.model)?;
    let spec = grid_spec(&args.grid, &model)?;
    let fp = fixed_point_options(&args.grid)?;
    let params = DesignParams::new(args.lambda0, args.lambda1)?;
    let (sol, _) = stationary_design(model.kernels.tail(), &params, &spec, &fp)?;
    let rows = sol.rho.grid().nodes().iter().zip(sol.rho.values().iter().zip(sol.rho_bar.values())).map(
        |(z, (r, rb))| {
            let cont = stopping_gap(&sol, *z) > 0.0;
            vec![z.to_string(), g(*z, &params).to_string(), r.to_string(), rb.to_string(), u8::from(cont).to_string()]
        },
    );
    let rows: Vec<Vec<String>> = rows.collect();
    write_csv(args.out.as_deref(), &["z", "g", "rho", "rho_bar", "continue_flag"], rows.into_iter())?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    command: &'static str,
    config: &'a VerifyArgs,
    lambda0: f64,
    lambda1: f64,
    c: f64,
    seed: u64,
    passed: bool,
    checks: Vec<Check>,
}

pub fn verify(args: &VerifyArgs) -> Result<Outcome, Failure> {
    let model = load_model(&args.model)?;
    let c = model.kernels.tail().mean_cost();
    let lambda0 = args.lambda0.unwrap_or(20.0 * c);
    let params = DesignParams::new(lambda0, args.lambda1.unwrap_or(lambda0))?;
    let cfg = VerifyConfig {
        params,
        grid: grid_spec(&args.grid, &model)?,
        fixed_point: fixed_point_options(&args.grid)?,
        reps: args.reps,
        seed: args.seed,
        cap: args.cap,
        max_brute_force_horizon: args.brute_force_horizon,
    };
    let checks = run_invariant_suite(&model, &cfg);
    for ch in &checks {
        eprintln!(
            "{} {:<36} value {:<12.3e} tol {:<9.1e} {}",
            if ch.passed { "ok  " } else { "FAIL" },
            ch.name,
            ch.value,
            ch.tolerance,
            ch.detail
        );
    }
    let passed = checks.iter().all(|ch| ch.passed);
    let report = VerifyReport {
        command: "verify",
        config: args,
        lambda0: params.lambda0,
        lambda1: params.lambda1,
        c,
        seed: args.seed,
        passed,
        checks,
    };
    write_json(&report, args.out.as_deref())?;
    Ok(if passed { Outcome::Success } else { Outcome::ChecksFailed })
}
