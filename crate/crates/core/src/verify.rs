//! Invariant suite run by the `verify` command.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{
    brute_force_truncated_optimum, constrained_optimality_audit, exact_oc, lagrangian, simulate, tail_decay_check,
    AuditReport, ExactOptions, Hypothesis, OcPoint, OperatingCharacteristics, PhiFamily, SimulationOptions,
};
use crate::io::ResolvedModel;
use crate::test_rules::{dp_rule_stationary, dp_rule_truncated, StationaryRuleOptions, StopTie, TestRule};
use crate::threshold_solver::{
    check_sign_pattern, gap_at_infinity, is_trivial, stationary_design,
};
use crate::value_iteration::{
    backward_induction, concavity_defect, g, rho_fixed_point, rho_iterates, DesignParams, FixedPointOptions,
    Grid, GridSpec, RhoSolution,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub params: DesignParams,
    pub grid: GridSpec,
    pub fixed_point: FixedPointOptions,
    pub reps: usize,
    pub seed: u64,
    pub cap: usize,
    /// Largest horizon for the exhaustive truncated-rule search.
    pub max_brute_force_horizon: usize,
}

/// Outcome of one invariant: `value` is the measured discrepancy, compared
/// against `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: value <= tolerance, value, tolerance, detail: detail.into() }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, value: if passed { 0.0 } else { 1.0 }, tolerance: 0.0, detail: detail.into() }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self::flag(name, false, format!("error: {err}"))
    }
}

fn run(name: &str, out: &mut Vec<Check>, f: impl FnOnce() -> Result<Vec<Check>>) {
    match f() {
        Ok(mut checks) => out.append(&mut checks),
        // exhaustive checks only apply to small models
        Err(e @ Error::StateSpaceTooLarge(_)) => out.push(Check::flag(name, true, format!("skipped: {e}"))),
        Err(e) => out.push(Check::failed(name, e)),
    }
}

/// Largest violation of the chain `0 <= rho_bar <= rho <= g` on the grid.
pub fn jensen_chain_defect(sol: &RhoSolution) -> f64 {
    let p = sol.params();
    sol.rho
        .grid()
        .nodes()
        .iter()
        .zip(sol.rho.values().iter().zip(sol.rho_bar.values()))
        .map(|(z, (r, rb))| (-rb).max(rb - r).max(r - g(*z, p)).max(0.0))
        .fold(0.0, f64::max)
}

/// Largest `|rho - min(g, c + rho_bar)|` on the grid.
pub fn fixed_point_defect(sol: &RhoSolution) -> f64 {
    let p = sol.params();
    sol.rho
        .grid()
        .nodes()
        .iter()
        .zip(sol.rho.values().iter().zip(sol.rho_bar.values()))
        .map(|(z, (r, rb))| (r - g(*z, p).min(sol.c + rb)).abs())
        .fold(0.0, f64::max)
}

/// Largest decrease of `lambda1 z - rho_bar(z)` between neighbouring nodes
/// (scaled by the node gap).
pub fn d1_monotonicity_defect(sol: &RhoSolution) -> f64 {
    let l1 = sol.params().lambda1;
    let z = sol.rho.grid().nodes();
    let v = sol.rho_bar.values();
    z.windows(2)
        .zip(v.windows(2))
        .map(|(zz, vv)| -((l1 * zz[1] - vv[1]) - (l1 * zz[0] - vv[0])) / (zz[1] - zz[0]))
        .fold(0.0, f64::max)
}

/// `max_z |z rho_bar(1; c/z, lambda/z) - rho_bar(z; c, lambda)|` at the given points,
/// with `lambda1 = 1`.
pub fn scaling_defect(model: &ResolvedModel, c: f64, lambda: f64, spec: &GridSpec, points: &[f64]) -> Result<f64> {
    let kernel = model.kernels.tail();
    let fp = FixedPointOptions::default();
    let mut worst = 0.0f64;
    for &z in points {
        let p = DesignParams::normalized(lambda)?;
        let grid = Arc::new(Grid::for_kernels(&GridSpec { anchor: z, ..*spec }, &p, [kernel])?);
        let base = rho_fixed_point(kernel, c, &p, grid, &fp)?;
        let ps = DesignParams::normalized(lambda / z)?;
        let grid = Arc::new(Grid::for_kernels(spec, &ps, [kernel])?);
        let scaled = rho_fixed_point(kernel, c / z, &ps, grid, &fp)?;
        worst = worst.max((z * scaled.rho_bar.eval(1.0) - base.rho_bar.eval(z)).abs());
    }
    Ok(worst)
}

/// The full invariant suite for one model and one design.
pub fn run_invariant_suite(model: &ResolvedModel, cfg: &VerifyConfig) -> Vec<Check> {
    let mut out = Vec::new();
    let p = cfg.params;
    let kernels = &model.kernels;
    let c = kernels.tail().mean_cost();

    for (k, kernel) in kernels.kernels().enumerate() {
        let lr = kernel.group_lr();
        let mass = (lr.atoms().iter().map(|a| a.p0).sum::<f64>() - 1.0)
            .abs()
            .max((lr.atoms().iter().map(|a| a.p1).sum::<f64>() - 1.0).abs());
        out.push(Check::within(
            &format!("kernel_{k}_lr_law"),
            mass.max(lr.consistency_error()),
            1e-10,
            "total masses and p1 = p0 z per atom",
        ));
        out.push(Check::within(
            &format!("kernel_{k}_hellinger"),
            (lr.hellinger() - kernel.hellinger_rate()).abs(),
            1e-12,
            format!("E0 sqrt(Z) vs sum p(n) h^n = {}", kernel.hellinger_rate()),
        ));
    }

    let design = stationary_design(kernels.tail(), &p, &cfg.grid, &cfg.fixed_point);
    let (sol, thresholds) = match design {
        Ok(d) => d,
        Err(e) => {
            out.push(Check::failed("stationary_solution", e));
            return out;
        }
    };
    out.push(Check::within("jensen_chain", jensen_chain_defect(&sol), 1e-9, "0 <= rho_bar <= rho <= g"));
    out.push(Check::within(
        "concavity_rho",
        concavity_defect(sol.rho.grid().nodes(), sol.rho.values()).max(0.0),
        1e-9,
        "second divided differences of rho",
    ));
    out.push(Check::within(
        "concavity_rho_bar",
        concavity_defect(sol.rho.grid().nodes(), sol.rho_bar.values()).max(0.0),
        1e-9,
        "second divided differences of rho_bar",
    ));
    out.push(Check::within("d1_monotone", d1_monotonicity_defect(&sol), 1e-9, "lambda1 z - rho_bar nondecreasing"));
    out.push(Check::within("fixed_point", fixed_point_defect(&sol), 1e-9, "rho = min(g, c + rho_bar)"));
    out.push(Check::within(
        "monotone_iterates",
        sol.monotonicity_violation.max(0.0),
        1e-12,
        format!("rho_k <= rho_(k-1) over {} iterations", sol.iterations),
    ));

    run("scaling_identity", &mut out, || {
        let v = scaling_defect(model, c / p.lambda1, p.lambda0 / p.lambda1, &cfg.grid, &[0.5, 2.0, 7.0])?;
        Ok(vec![Check::within("scaling_identity", v, 1e-6, "z rho_bar(1; c/z, lambda/z) = rho_bar(z)")])
    });

    run("truncation_monotonicity", &mut out, || {
        let grid = Arc::new(Grid::for_kernels(&cfg.grid, &p, kernels.kernels())?);
        let mut worst = 0.0f64;
        let mut prev = backward_induction(kernels, &p, 1, grid.clone())?;
        for n in 2..=20 {
            let next = backward_induction(kernels, &p, n, grid.clone())?;
            for (a, b) in next.stage(1).values().iter().zip(prev.stage(1).values()) {
                worst = worst.max(a - b);
            }
            prev = next;
        }
        Ok(vec![Check::within("truncation_monotonicity", worst, 1e-12, "V_1^N nonincreasing in N, N <= 20")])
    });

    if kernels.is_stationary() {
        run("ladder_identity", &mut out, || {
            let grid = sol.rho.grid().clone();
            let n = 50;
            let ladder = backward_induction(kernels, &p, n, grid.clone())?;
            let iterates = rho_iterates(kernels.tail(), c, &p, n - 1, grid)?;
            let mut worst = 0.0f64;
            for k in 1..=n {
                for (a, b) in ladder.stage(k).values().iter().zip(iterates[n - k].values()) {
                    worst = worst.max((a - b).abs());
                }
            }
            Ok(vec![Check::within("ladder_identity", worst, 1e-12, "V_k^N = rho_(N-k), N = 50")])
        });
    }

    let trivial = is_trivial(&sol);
    let mut stationary_rule: Option<TestRule> = None;
    match &thresholds {
        Ok(th) => {
            out.push(Check::within(
                "threshold_residuals",
                th.residual_a.max(th.residual_b),
                1e-8,
                format!("A = {}, B = {}", th.a, th.b),
            ));
            let sp = check_sign_pattern(&sol, th);
            out.push(Check::flag("threshold_sign_pattern", sp.holds, format!("{sp:?}")));
            let expect_infinite = gap_at_infinity(&sol) > 0.0;
            out.push(Check::flag(
                "upper_threshold_existence",
                expect_infinite == th.b.is_infinite(),
                format!("B = {}, limit of g - c - rho_bar = {}", th.b, gap_at_infinity(&sol)),
            ));
            stationary_rule = dp_rule_stationary(&sol, &StationaryRuleOptions::default()).ok();
        }
        Err(e) => out.push(Check::flag("threshold_solution", trivial, format!("{e} (trivial = {trivial})"))),
    }

    let exact = ExactOptions { cap: cfg.cap, mass_tol: 1e-12, ..Default::default() };
    if let Some(rule) = &stationary_rule {
        run("stationary_equality", &mut out, || {
            let oc = exact_oc(rule, kernels, &exact)?;
            let mut checks = vec![Check::within(
                "conservation",
                oc.conservation_error,
                1e-10,
                "stopped + continuing mass = 1",
            )];
            checks.push(Check::within(
                "cost_cross_check",
                (oc.k0 - oc.k_stagewise[0]).abs().max((oc.k1 - oc.k_stagewise[1]).abs()),
                1e-9,
                "per-path vs stagewise expected cost",
            ));
            if oc.truncation_mass[0] < 1e-10 {
                let l = lagrangian(&oc, &p);
                checks.push(Check::within(
                    "infinite_horizon_equality",
                    (l - sol.lagrangian_lower_bound()).abs(),
                    1e-5,
                    format!("L = {l}, c + rho_bar(1) = {}", sol.lagrangian_lower_bound()),
                ));
            } else {
                checks.push(Check::flag("infinite_horizon_equality", false, "H0 mass left at the cap"));
            }
            checks.extend(never_stops_under_h1(rule, model, &oc));
            if rule.tail.is_some_and(|r| r.upper.is_finite()) {
                let t = tail_decay_check(rule, kernels, Hypothesis::H0, &exact)?;
                checks.push(Check::flag(
                    "geometric_tail",
                    t.fit.degenerate || (t.fit.r_hat < 1.0 && t.envelope_holds),
                    format!("r_hat = {}, a = {}, Hellinger rate = {}", t.fit.r_hat, t.fit.a, t.hellinger_rate),
                ));
                if let Some(excess) = t.hellinger_excess {
                    checks.push(Check::within("hellinger_bound", excess.max(0.0), 1e-12, "P0(tau > k) <= r^k / sqrt(A)"));
                }
            }
            checks.extend(monte_carlo_checks(rule, model, &oc, cfg)?);
            Ok(checks)
        });
    }

    if kernels.is_stationary() && gap_at_infinity(&sol) > 0.0 {
        run("strict_rule", &mut out, || {
            let opts = StationaryRuleOptions { stop_tie: StopTie::Continue, ..Default::default() };
            let rule = dp_rule_stationary(&sol, &opts)?;
            let oc = exact_oc(&rule, kernels, &exact)?;
            let mut checks = vec![Check::flag(
                "strict_rule_one_sided",
                rule.tail.is_some_and(|r| r.upper.is_infinite()),
                format!("{:?}", rule.tail),
            )];
            checks.extend(never_stops_under_h1(&rule, model, &oc));
            Ok(checks)
        });
    }

    let stationary_point = match &stationary_rule {
        Some(rule) => exact_oc(rule, kernels, &exact)
            .ok()
            .filter(|oc| oc.terminated[0] && oc.terminated[1])
            .map(|oc| oc.point()),
        None => None,
    };
    for n in 1..=cfg.max_brute_force_horizon {
        run(&format!("brute_force_n{n}"), &mut out, || {
            let grid = Arc::new(Grid::for_kernels(&cfg.grid, &p, kernels.kernels())?);
            let ladder = backward_induction(kernels, &p, n, grid)?;
            let rule = dp_rule_truncated(&ladder, StopTie::Stop)?;
            let bf = brute_force_truncated_optimum(&model.model, &model.groups, &model.cost, &p, n)?;
            let dp = bf.states.assignment_of(&rule);
            let mut checks = vec![
                Check::within(
                    &format!("brute_force_n{n}_minimum"),
                    (bf.min_lagrangian - ladder.lower_bound()).abs(),
                    1e-9,
                    format!("exhaustive minimum {} over {} rules", bf.min_lagrangian, bf.rules_checked),
                ),
                Check::flag(&format!("brute_force_n{n}_dp_rule_optimal"), bf.minimizers.contains(&dp), "DP rule among minimizers"),
            ];
            let candidates: Vec<OcPoint> = match bf.states.candidates(PhiFamily::Auto) {
                Ok(c) => c.iter().map(|c| c.point()).collect(),
                Err(e @ Error::StateSpaceTooLarge(_)) => {
                    checks.push(Check::flag(&format!("audit_n{n}"), true, format!("skipped: {e}")));
                    return Ok(checks);
                }
                Err(e) => return Err(e),
            };
            let truncated = constrained_optimality_audit(&bf.states.rule_oc(&rule).point(), &candidates, false, 1e-9);
            checks.push(audit_check(&format!("audit_n{n}_truncated_k0"), &truncated));
            if let Some(reference) = stationary_point {
                let both = constrained_optimality_audit(&reference, &candidates, true, 1e-9);
                checks.push(audit_check(&format!("audit_n{n}_stationary_k0_k1"), &both));
            }
            Ok(checks)
        });
    }
    out
}

fn audit_check(name: &str, report: &AuditReport) -> Check {
    let worst = report.violations.iter().map(|v| v.margin).fold(0.0, f64::max);
    Check {
        name: name.into(),
        passed: report.passed(),
        value: worst,
        tolerance: 1e-9,
        detail: format!(
            "{} candidates, {} with no larger errors, {} violations",
            report.checked,
            report.eligible,
            report.violations.len()
        ),
    }
}

/// When every H1-possible atom raises `z` and the rule only stops below
/// `A < 1`, nothing stops under H1.
fn never_stops_under_h1(rule: &TestRule, model: &ResolvedModel, oc: &OperatingCharacteristics) -> Vec<Check> {
    let Some(region) = rule.tail else { return Vec::new() };
    let rising = model.kernels.kernels().all(|k| k.group_lr().atoms().iter().all(|a| a.p1 == 0.0 || a.log_lr >= 0.0));
    if !(rising && region.upper.is_infinite() && region.lower < 1.0 && rule.stages.is_empty()) {
        return Vec::new();
    }
    vec![
        Check::within("never_stops_under_h1", (1.0 - oc.truncation_mass[1]).abs(), 1e-12, "H1 mass left at the cap"),
        Check::within("no_false_rejections", oc.alpha, 0.0, "alpha"),
    ]
}

fn monte_carlo_checks(
    rule: &TestRule,
    model: &ResolvedModel,
    oc: &OperatingCharacteristics,
    cfg: &VerifyConfig,
) -> Result<Vec<Check>> {
    if cfg.reps == 0 {
        return Ok(Vec::new());
    }
    let opts = SimulationOptions { reps: cfg.reps, seed: cfg.seed, cap: cfg.cap };
    let mut checks = Vec::new();
    let z_score = |est: f64, exact: f64, se: Option<f64>, p: Option<f64>| -> f64 {
        let n = cfg.reps as f64;
        let floor = p.map_or(0.0, |p| (p * (1.0 - p) / n).sqrt());
        let s = se.unwrap_or(0.0).max(floor);
        if s == 0.0 {
            if est == exact { 0.0 } else { f64::INFINITY }
        } else {
            (est - exact).abs() / s
        }
    };
    if oc.truncation_mass[0] < 1e-10 {
        let r = simulate(rule, &model.model, &model.groups, &model.cost, Hypothesis::H0, &opts)?;
        checks.push(Check::within("mc_alpha", z_score(r.reject_rate, oc.alpha, r.reject_rate_se, Some(oc.alpha)), 4.0, "standard errors"));
        checks.push(Check::within("mc_k0", z_score(r.mean_cost, oc.k0, r.mean_cost_se, None), 4.0, "standard errors"));
        checks.push(Check::within("mc_tau0", z_score(r.mean_tau, oc.e_tau0, r.mean_tau_se, None), 4.0, "standard errors"));
    }
    if oc.truncation_mass[1] < 1e-10 {
        let r = simulate(rule, &model.model, &model.groups, &model.cost, Hypothesis::H1, &opts)?;
        checks.push(Check::within("mc_beta", z_score(r.accept_rate, oc.beta, r.accept_rate_se, Some(oc.beta)), 4.0, "standard errors"));
        checks.push(Check::within("mc_k1", z_score(r.mean_cost, oc.k1, r.mean_cost_se, None), 4.0, "standard errors"));
    }
    Ok(checks)
}
