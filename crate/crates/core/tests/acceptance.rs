//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rgseq::evaluator::{
    brute_force_truncated_optimum, constrained_optimality_audit, exact_oc, lagrangian, simulate, tail_decay_check,
    ExactOptions, Hypothesis, OcPoint, OperatingCharacteristics, PhiFamily, SimulationOptions,
};
use rgseq::io::{ModelFile, ResolvedModel};
use rgseq::model::{CostModel, GroupSizeModel, KernelSequence, ObservationModel};
use rgseq::test_rules::{dp_rule_stationary, dp_rule_truncated, StationaryRuleOptions, StopTie, TestRule};
use rgseq::threshold_solver::{
    check_sign_pattern, design_from_thresholds, gap_at_infinity, solve_thresholds, stationary_design, RhoCache,
};
use rgseq::value_iteration::{
    backward_induction, concavity_defect, rho_fixed_point, rho_iterates, DesignParams, FixedPointOptions, Grid,
    GridSpec,
};
use rgseq::verify::{jensen_chain_defect, scaling_defect};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> ResolvedModel {
    ModelFile::load(root().join("models").join(name)).unwrap().resolve().unwrap()
}

fn load_rule(name: &str) -> TestRule {
    serde_json::from_str(&std::fs::read_to_string(root().join("rules").join(name)).unwrap()).unwrap()
}

const MODELS: [&str; 4] = ["bernoulli.json", "bernoulli_groups.json", "ternary_groups.json", "uniform_counterexample.json"];

/// Multipliers used for a model's reference design.
fn reference_params(m: &ResolvedModel) -> DesignParams {
    let l = 20.0 * m.kernels.tail().mean_cost();
    DesignParams::new(l, l).unwrap()
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn counterexample_closed_form() -> Outcome {
    let m = ObservationModel::new(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
    let kernels = KernelSequence::build(&m, &GroupSizeModel::fixed(1), &CostModel::Constant { a: 1.0 }, 1e-12, 1000).unwrap();
    let p = DesignParams::new(2.0, 1.0).unwrap();
    let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, kernels.kernels()).unwrap());
    let sol = rho_fixed_point(kernels.tail(), 1.0, &p, grid, &FixedPointOptions::default()).unwrap();
    let z = sol.rho.grid().nodes();
    let e_rho = z.iter().zip(sol.rho.values()).map(|(z, v)| (v - z.min(2.0)).abs()).fold(0.0, f64::max);
    let e_bar = z.iter().zip(sol.rho_bar.values()).map(|(z, v)| (v - z.min(1.0)).abs()).fold(0.0, f64::max);
    outcome(
        e_rho <= 1e-8 && e_bar <= 1e-8,
        format!("max|rho - min(z,2)| = {e_rho:.1e}, max|rho_bar - min(z,1)| = {e_bar:.1e} over {} nodes (tol 1e-8)", z.len()),
    )
}

fn ladder_identity() -> Outcome {
    let m = load("bernoulli.json");
    let p = reference_params(&m);
    let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, m.kernels.kernels()).unwrap());
    let n = 50;
    let ladder = backward_induction(&m.kernels, &p, n, grid.clone()).unwrap();
    let iterates = rho_iterates(m.kernels.tail(), m.kernels.tail().mean_cost(), &p, n - 1, grid).unwrap();
    let mut worst = 0.0f64;
    for k in 1..=n {
        for (a, b) in ladder.stage(k).values().iter().zip(iterates[n - k].values()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max|V_k^50 - rho_(50-k)| = {worst:.1e} (tol 1e-12)"))
}

fn truncation_monotonicity() -> Outcome {
    let m = load("bernoulli.json");
    let p = reference_params(&m);
    let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, m.kernels.kernels()).unwrap());
    let mut worst = f64::NEG_INFINITY;
    let mut prev = backward_induction(&m.kernels, &p, 1, grid.clone()).unwrap();
    for n in 2..=20 {
        let next = backward_induction(&m.kernels, &p, n, grid.clone()).unwrap();
        for (a, b) in next.stage(1).values().iter().zip(prev.stage(1).values()) {
            worst = worst.max(a - b);
        }
        prev = next;
    }
    outcome(worst <= 1e-12, format!("max (V_1^(N+1) - V_1^N) = {worst:.1e} for N = 1..19 (tol 1e-12)"))
}

fn jensen_and_concavity() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in MODELS {
        let m = load(name);
        let p = reference_params(&m);
        let spec = GridSpec::recommended(m.kernels.kernels());
        let (sol, _) = stationary_design(m.kernels.tail(), &p, &spec, &FixedPointOptions::default()).unwrap();
        let chain = jensen_chain_defect(&sol);
        let nodes = sol.rho.grid().nodes();
        let conc = concavity_defect(nodes, sol.rho.values()).max(concavity_defect(nodes, sol.rho_bar.values()));
        passed &= chain <= 1e-9 && conc <= 1e-9;
        parts.push(format!("{name}: chain {chain:.0e}, concavity {conc:.0e}"));
    }
    outcome(passed, format!("{} (tol 1e-9)", parts.join("; ")))
}

fn scaling_identity() -> Outcome {
    let m = load("bernoulli.json");
    let p = reference_params(&m);
    let c = m.kernels.tail().mean_cost() / p.lambda1;
    let worst = scaling_defect(&m, c, p.lambda0 / p.lambda1, &GridSpec::default(), &[0.5, 2.0, 7.0]).unwrap();
    outcome(worst <= 1e-6, format!("max over z in {{0.5, 2, 7}} = {worst:.1e} (tol 1e-6)"))
}

fn threshold_equations() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    let small_cost = load("bernoulli.json").with_mean_cost(0.02).unwrap();
    let cases = [
        ("bernoulli", load("bernoulli.json"), None),
        ("bernoulli c=0.02 lambda=5", small_cost, Some(DesignParams::new(5.0, 5.0).unwrap())),
        ("bernoulli_groups", load("bernoulli_groups.json"), None),
        ("ternary_groups", load("ternary_groups.json"), None),
    ];
    for (label, m, params) in cases {
        let p = params.unwrap_or_else(|| reference_params(&m));
        let spec = GridSpec::recommended(m.kernels.kernels());
        let (sol, th) = stationary_design(m.kernels.tail(), &p, &spec, &FixedPointOptions::default()).unwrap();
        let th = th.unwrap();
        let residual = th.residual_a.max(th.residual_b);
        let sign = check_sign_pattern(&sol, &th).holds;
        passed &= residual < 1e-8 && sign && th.b.is_finite();
        parts.push(format!("{label}: A={:.4e} B={:.4e} residual {residual:.0e} sign {sign}", th.a, th.b));
    }
    let m = load("bernoulli.json");
    let fp = FixedPointOptions { tol: 1e-12, max_iter: 100_000 };
    let cache = RhoCache::new(m.kernels.tail().clone(), GridSpec::default(), fp);
    let (a, b) = (1.0 / 9.0, 9.0);
    let inv = design_from_thresholds(a, b, &cache).unwrap();
    let th = solve_thresholds(&cache.solve(inv.c, inv.lambda).unwrap()).unwrap();
    let trip = (th.a / a - 1.0).abs().max((th.b / b - 1.0).abs());
    passed &= trip <= 1e-6;
    parts.push(format!("inverse (1/9, 9) -> lambda={:.6} c={:.6} -> round trip {trip:.0e} (tol 1e-6)", inv.lambda, inv.c));
    outcome(passed, format!("{} (residual tol 1e-8)", parts.join("; ")))
}

fn brute_force_oracle() -> Outcome {
    let mut passed = true;
    let mut worst = 0.0f64;
    let mut runs = 0;
    for name in ["bernoulli.json", "bernoulli_groups.json"] {
        let m = load(name);
        let c = m.kernels.tail().mean_cost();
        for lambda in [4.0 * c, 20.0 * c] {
            let p = DesignParams::new(lambda, lambda).unwrap();
            let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, m.kernels.kernels()).unwrap());
            for n in 1..=3 {
                let ladder = backward_induction(&m.kernels, &p, n, grid.clone()).unwrap();
                let rule = dp_rule_truncated(&ladder, StopTie::Stop).unwrap();
                let bf = brute_force_truncated_optimum(&m.model, &m.groups, &m.cost, &p, n).unwrap();
                let gap = (bf.min_lagrangian - ladder.lower_bound()).abs();
                worst = worst.max(gap);
                passed &= gap <= 1e-9 && bf.minimizers.contains(&bf.states.assignment_of(&rule));
                runs += 1;
            }
        }
    }
    outcome(
        passed,
        format!("{runs} cases (G={{1}}, G={{1,2}}; N=1..3; two multipliers): max|min L_N - c_1 - V_bar_1^N(1)| = {worst:.0e} (tol 1e-9), DP rule always a minimizer"),
    )
}

fn stationary_rule(m: &ResolvedModel, p: &DesignParams) -> (TestRule, f64) {
    let spec = GridSpec::recommended(m.kernels.kernels());
    let (sol, _) = stationary_design(m.kernels.tail(), p, &spec, &FixedPointOptions::default()).unwrap();
    (dp_rule_stationary(&sol, &StationaryRuleOptions::default()).unwrap(), sol.lagrangian_lower_bound())
}

fn infinite_horizon_equality() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    let small_cost = load("bernoulli.json").with_mean_cost(0.02).unwrap();
    let cases = [
        ("bernoulli", load("bernoulli.json"), None),
        ("bernoulli c=0.02 lambda=5", small_cost, Some(DesignParams::new(5.0, 5.0).unwrap())),
        ("bernoulli_groups", load("bernoulli_groups.json"), None),
        ("ternary_groups", load("ternary_groups.json"), None),
    ];
    for (label, m, params) in cases {
        let p = params.unwrap_or_else(|| reference_params(&m));
        let (rule, bound) = stationary_rule(&m, &p);
        let oc = exact_oc(&rule, &m.kernels, &ExactOptions::default()).unwrap();
        let gap = (lagrangian(&oc, &p) - bound).abs();
        passed &= oc.truncation_mass[0] < 1e-10 && gap <= 1e-5;
        parts.push(format!("{label}: |L - c - rho_bar(1)| = {gap:.1e}, H0 mass left {:.0e}", oc.truncation_mass[0]));
    }
    outcome(passed, format!("{} (tol 1e-5)", parts.join("; ")))
}

fn optimality_audit() -> Outcome {
    let mut violations = 0;
    let mut eligible_stationary = 0;
    let mut audits = 0;
    for name in ["bernoulli.json", "bernoulli_groups.json"] {
        let m = load(name);
        let c = m.kernels.tail().mean_cost();
        for scale in [3.0, 4.0, 6.0, 10.0, 20.0] {
            let p = DesignParams::new(scale * c, scale * c).unwrap();
            let (rule, _) = stationary_rule(&m, &p);
            let oc = exact_oc(&rule, &m.kernels, &ExactOptions::default()).unwrap();
            assert!(oc.terminated[0] && oc.terminated[1]);
            let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, m.kernels.kernels()).unwrap());
            for n in 1..=3 {
                let bf = brute_force_truncated_optimum(&m.model, &m.groups, &m.cost, &p, n).unwrap();
                let candidates: Vec<OcPoint> =
                    bf.states.candidates(PhiFamily::Auto).unwrap().iter().map(|c| c.point()).collect();
                let ladder = backward_induction(&m.kernels, &p, n, grid.clone()).unwrap();
                let truncated = dp_rule_truncated(&ladder, StopTie::Stop).unwrap();
                let k0 = constrained_optimality_audit(&bf.states.rule_oc(&truncated).point(), &candidates, false, 1e-9);
                let both = constrained_optimality_audit(&oc.point(), &candidates, true, 1e-9);
                violations += k0.violations.len() + both.violations.len();
                eligible_stationary += both.eligible;
                audits += 2;
            }
        }
    }
    outcome(
        violations == 0 && eligible_stationary > 0,
        format!(
            "{audits} audits over N<=3 candidate sets: {violations} violations; {eligible_stationary} candidates with no larger errors than the stationary rule checked on K0 and K1"
        ),
    )
}

fn counterexample_behaviour() -> Outcome {
    let m = load("uniform_counterexample.json");
    let p = DesignParams::new(2.0, 1.0).unwrap();
    let (sol, _) = stationary_design(m.kernels.tail(), &p, &GridSpec::default(), &FixedPointOptions::default()).unwrap();
    let opts = StationaryRuleOptions { stop_tie: StopTie::Continue, ..Default::default() };
    let rule = dp_rule_stationary(&sol, &opts).unwrap();
    let (a, b) = rule.tail_thresholds().unwrap();
    let mut passed = b.is_infinite() && (a - 2.0).abs() < 1e-9;
    let mut worst_alpha = 0.0f64;
    let mut worst_mass = 0.0f64;
    for cap in [1, 2, 10, 100, 1000, 5000] {
        let oc = exact_oc(&rule, &m.kernels, &ExactOptions { cap, ..Default::default() }).unwrap();
        worst_alpha = worst_alpha.max(oc.alpha);
        worst_mass = worst_mass.max((oc.truncation_mass[1] - 1.0).abs());
    }
    passed &= worst_alpha == 0.0 && worst_mass == 0.0;
    // larger multiplier: the stopping gap stays positive at infinity, so B is infinite
    let p20 = DesignParams::new(20.0, 1.0).unwrap();
    let (sol20, th20) = stationary_design(m.kernels.tail(), &p20, &GridSpec::default(), &FixedPointOptions::default()).unwrap();
    let th20 = th20.unwrap();
    passed &= th20.b.is_infinite() && gap_at_infinity(&sol20) > 0.0;
    let tail = tail_decay_check(&rule, &m.kernels, Hypothesis::H1, &ExactOptions { cap: 200, ..Default::default() }).unwrap();
    passed &= tail.fit.non_geometric;
    outcome(
        passed,
        format!(
            "strict rule continues on [{a}, inf); alpha = {worst_alpha}, |H1 mass left - 1| = {worst_mass} for caps 1..5000; lambda0=20 gives B = {}; H1 tail flagged non-geometric: {}",
            th20.b, tail.fit.non_geometric
        ),
    )
}

/// Pairs of bundled models and rules.
const PAIRS: [(&str, &str); 6] = [
    ("bernoulli.json", "bernoulli_wald.json"),
    ("bernoulli.json", "bernoulli_optimal.json"),
    ("bernoulli.json", "bernoulli_truncated3.json"),
    ("bernoulli_groups.json", "bernoulli_groups_optimal.json"),
    ("ternary_groups.json", "ternary_groups_optimal.json"),
    ("uniform_counterexample.json", "uniform_strict.json"),
];

fn z_score(est: f64, exact: f64, se: Option<f64>, reps: usize, proportion: bool) -> f64 {
    let floor = if proportion { (exact * (1.0 - exact) / reps as f64).sqrt() } else { 0.0 };
    let s = se.unwrap_or(0.0).max(floor);
    if s == 0.0 {
        if est == exact { 0.0 } else { f64::INFINITY }
    } else {
        (est - exact).abs() / s
    }
}

/// Largest z-score over the compared estimates; H1 is skipped when the rule
/// does not terminate there.
fn mc_worst(m: &ResolvedModel, rule: &TestRule, oc: &OperatingCharacteristics, reps: usize, seed: u64) -> (f64, usize) {
    let opts = SimulationOptions { reps, seed, cap: 10_000 };
    let mut worst = 0.0f64;
    let mut compared = 0;
    if oc.terminated[0] {
        let r = simulate(rule, &m.model, &m.groups, &m.cost, Hypothesis::H0, &opts).unwrap();
        worst = worst
            .max(z_score(r.reject_rate, oc.alpha, r.reject_rate_se, reps, true))
            .max(z_score(r.mean_cost, oc.k0, r.mean_cost_se, reps, false))
            .max(z_score(r.mean_tau, oc.e_tau0, r.mean_tau_se, reps, false));
        compared += 3;
    }
    if oc.terminated[1] {
        let r = simulate(rule, &m.model, &m.groups, &m.cost, Hypothesis::H1, &opts).unwrap();
        worst = worst
            .max(z_score(r.accept_rate, oc.beta, r.accept_rate_se, reps, true))
            .max(z_score(r.mean_tau, oc.e_tau1, r.mean_tau_se, reps, false));
        compared += 2;
    }
    (worst, compared)
}

fn monte_carlo_consistency() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (model, rule_name) in PAIRS {
        let start = Instant::now();
        let m = load(model);
        let rule = load_rule(rule_name);
        let oc = exact_oc(&rule, &m.kernels, &ExactOptions::default()).unwrap();
        let (mut worst, compared) = mc_worst(&m, &rule, &oc, 100_000, 1);
        let mut note = "";
        if worst > 4.0 {
            worst = mc_worst(&m, &rule, &oc, 400_000, 2).0;
            note = " after retry";
        }
        let elapsed = start.elapsed();
        let ok = worst <= 4.0 && compared > 0 && elapsed < Duration::from_secs(30);
        passed &= ok;
        parts.push(format!("{rule_name}: max z = {worst:.2}{note} over {compared} estimates, {:.1}s", elapsed.as_secs_f64()));
    }
    outcome(passed, format!("{} (tol 4 SE, < 30 s per pair)", parts.join("; ")))
}

fn geometric_tail() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (model, rule_name) in PAIRS {
        let m = load(model);
        let rule = load_rule(rule_name);
        if rule.tail_thresholds().is_none_or(|(_, b)| b.is_infinite()) {
            continue;
        }
        for h in [Hypothesis::H0, Hypothesis::H1] {
            let t = tail_decay_check(&rule, &m.kernels, h, &ExactOptions::default()).unwrap();
            let ok = !t.fit.degenerate && t.fit.r_hat < 1.0 && t.envelope_holds;
            passed &= ok;
            if h == Hypothesis::H0 {
                passed &= t.hellinger_excess.is_none_or(|e| e <= 1e-12);
                parts.push(format!(
                    "{rule_name}: r_hat = {:.4} (Hellinger r = {:.4}), a = {:.3}",
                    t.fit.r_hat, t.hellinger_rate, t.fit.a
                ));
            }
        }
    }
    outcome(passed, format!("{} (H0 and H1 tails; envelope P(tau >= k) <= a r_hat^k)", parts.join("; ")))
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 12] = [
        ("uniform counterexample closed form", counterexample_closed_form, Some(Duration::from_secs(1))),
        ("ladder identity, N = 50", ladder_identity, Some(Duration::from_secs(5))),
        ("truncation monotonicity, N = 1..20", truncation_monotonicity, None),
        ("Jensen chain and concavity", jensen_and_concavity, None),
        ("scaling identity", scaling_identity, None),
        ("threshold equations and inverse design", threshold_equations, None),
        ("finite-horizon brute-force oracle", brute_force_oracle, Some(Duration::from_secs(60))),
        ("infinite-horizon equality", infinite_horizon_equality, None),
        ("constrained optimality audit", optimality_audit, None),
        ("counterexample behaviour", counterexample_behaviour, None),
        ("Monte Carlo consistency", monte_carlo_consistency, None),
        ("geometric tail", geometric_tail, None),
    ];
    let mut failures = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut result = check();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > *limit {
                result.passed = false;
                result.detail.push_str(&format!("; runtime over {:.0} s", limit.as_secs_f64()));
            }
        }
        if !result.passed {
            failures += 1;
        }
        println!(
            "{} [{:>2}] {name} ({:.2} s): {}",
            if result.passed { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
