//! Stopping and decision rules driven by the likelihood ratio.
//!
//! Every rule here continues at stage `k` exactly when `z` lies in an
//! interval `(A_k, B_k)`, stops with probability `gamma_A` / `gamma_B` on the
//! boundary atoms and stops surely elsewhere. On stopping it rejects H0 iff
//! `z` exceeds the decision threshold (ties follow the decision policy).
//! `z = 0` always stops and accepts, `z = +inf` always stops and rejects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KernelSequence;
use crate::threshold_solver::{bisect_log, gap_at_infinity, solve_thresholds, stopping_gap};
use crate::value_iteration::{g, PrefixedValues, RhoSolution, SmoothedValue, ValueLadder};

/// Two likelihood ratios closer than this in log are the same boundary atom.
pub const BOUNDARY_LOG_TOL: f64 = 1e-9;
/// Gap values within this of zero count as ties under [`StopTie::Continue`].
pub const TIE_TOL: f64 = 1e-9;

/// What to do where stopping and continuing cost the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopTie {
    #[default]
    Stop,
    Continue,
}

/// Decision at `z` equal to the decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionTie {
    #[default]
    Reject,
    Accept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Truncated,
    Stationary,
    Prefixed,
}

/// Continuation interval with boundary stop probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "A")]
    pub lower: f64,
    #[serde(rename = "B", with = "crate::threshold_solver::extended")]
    pub upper: f64,
    #[serde(rename = "gamma_A")]
    pub gamma_lower: f64,
    #[serde(rename = "gamma_B")]
    pub gamma_upper: f64,
}

fn same_atom(z: f64, t: f64) -> bool {
    t.is_finite() && (z.ln() - t.ln()).abs() < BOUNDARY_LOG_TOL
}

impl Region {
    pub fn new(lower: f64, upper: f64, gamma_lower: f64, gamma_upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper) {
            return Err(Error::BadThresholds { lower, upper });
        }
        for gamma in [gamma_lower, gamma_upper] {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::InvalidParameter(format!("boundary stop probability {gamma} not in [0, 1]")));
            }
        }
        Ok(Self { lower, upper, gamma_lower, gamma_upper })
    }

    /// A region in which nothing continues.
    pub fn empty() -> Self {
        Self { lower: 1.0, upper: 1.0, gamma_lower: 1.0, gamma_upper: 1.0 }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lower < self.upper)
    }

    /// Probability of stopping at `z`.
    pub fn stop_probability(&self, z: f64) -> f64 {
        if z == 0.0 || z == f64::INFINITY || self.is_empty() {
            return 1.0;
        }
        if same_atom(z, self.lower) {
            self.gamma_lower
        } else if same_atom(z, self.upper) {
            self.gamma_upper
        } else if self.lower < z && z < self.upper {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// What a rule does at one `(stage, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// `Stop` whenever the stop probability is positive.
    pub action: Action,
    pub stop_probability: f64,
    /// Decision taken if the rule stops here.
    pub decision: Decision,
}

impl Verdict {
    /// Resolves boundary randomization with a caller-supplied uniform variate.
    pub fn stops(&self, u: f64) -> bool {
        u < self.stop_probability
    }
}

/// Stopping rule (per-stage regions) together with its decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RuleFile", into = "RuleFile")]
pub struct TestRule {
    pub kind: RuleKind,
    /// Stage at which a truncated rule stops surely.
    pub horizon: Option<usize>,
    /// Regions for stages `1..=stages.len()`.
    pub stages: Vec<Region>,
    /// Region for all later stages; `None` stops there.
    pub tail: Option<Region>,
    pub decision_threshold: f64,
    pub decision_tie: DecisionTie,
    pub stop_tie: StopTie,
}

impl TestRule {
    /// Region in force after `k` groups, `None` when the rule must stop.
    pub fn region_at(&self, k: usize) -> Option<&Region> {
        if self.horizon.is_some_and(|n| k >= n) {
            return None;
        }
        if k >= 1 && k <= self.stages.len() {
            Some(&self.stages[k - 1])
        } else {
            self.tail.as_ref()
        }
    }

    pub fn decision_at(&self, z: f64) -> Decision {
        let d = self.decision_threshold;
        if z == f64::INFINITY {
            Decision::Reject
        } else if same_atom(z, d) && z > 0.0 {
            match self.decision_tie {
                DecisionTie::Reject => Decision::Reject,
                DecisionTie::Accept => Decision::Accept,
            }
        } else if z > d {
            Decision::Reject
        } else {
            Decision::Accept
        }
    }

    /// Lower and upper thresholds of the stationary part.
    pub fn tail_thresholds(&self) -> Option<(f64, f64)> {
        self.tail.map(|r| (r.lower, r.upper))
    }
}

/// Likelihood ratio from its logarithm. A finite log is kept finite, so only
/// a genuinely infinite ratio reaches the always-stop state at `+inf`.
pub fn z_from_log(log_z: f64) -> f64 {
    match log_z {
        f64::NEG_INFINITY => 0.0,
        f64::INFINITY => f64::INFINITY,
        l => l.exp().min(f64::MAX),
    }
}

/// Verdict of `rule` after `k >= 1` groups at likelihood ratio `z`.
pub fn evaluate_rule_at(rule: &TestRule, k: usize, z: f64) -> Verdict {
    let stop_probability = match rule.region_at(k) {
        None => 1.0,
        Some(r) => r.stop_probability(z),
    };
    Verdict {
        action: if stop_probability > 0.0 { Action::Stop } else { Action::Continue },
        stop_probability,
        decision: rule.decision_at(z),
    }
}

/// Random group-sequential probability ratio test: continue on `(A, B)`,
/// accept at or below `A`, reject at or above `B`.
pub fn rsprt(a: f64, b: f64, gamma_a: f64, gamma_b: f64, decision_tie_at_b: DecisionTie) -> Result<TestRule> {
    Ok(TestRule {
        kind: RuleKind::Stationary,
        horizon: None,
        stages: Vec::new(),
        tail: Some(Region::new(a, b, gamma_a, gamma_b)?),
        decision_threshold: b,
        decision_tie: decision_tie_at_b,
        stop_tie: StopTie::Stop,
    })
}

/// Extracts `{z : gap(z) > 0}` (or `>= 0` when ties continue) as an interval
/// from its sign on `nodes`, refining both ends by bisection.
pub(crate) fn extract_region(
    nodes: &[f64],
    gap: impl Fn(f64) -> f64,
    gap_at_infinity: f64,
    tie: StopTie,
    stage: usize,
) -> Result<Region> {
    let cont = |v: f64| match tie {
        StopTie::Stop => v > 0.0,
        StopTie::Continue => v >= -TIE_TOL,
    };
    let flags: Vec<bool> = nodes.iter().map(|z| cont(gap(*z))).collect();
    let Some(i0) = flags.iter().position(|f| *f) else {
        return Ok(Region::empty());
    };
    let i1 = flags.iter().rposition(|f| *f).unwrap();
    if flags[i0..=i1].iter().any(|f| !f) {
        return Err(Error::NonIntervalContinuation { stage });
    }
    let n = nodes.len();
    if i0 == 0 {
        return Err(Error::GridTooNarrow(format!("stage {stage} continuation reaches the grid minimum")));
    }
    let pick = |lo: f64, hi: f64, inner: f64| -> f64 {
        match tie {
            StopTie::Stop => {
                if gap(hi).abs() < gap(lo).abs() {
                    hi
                } else {
                    lo
                }
            }
            // the first continuing point, snapped onto the node it approximates
            StopTie::Continue => {
                let edge = if inner > lo { hi } else { lo };
                if (edge / inner - 1.0).abs() < 1e-8 {
                    inner
                } else {
                    edge
                }
            }
        }
    };
    let (lo, hi) = bisect_log(nodes[i0 - 1], nodes[i0], |z| cont(gap(z)));
    let lower = pick(lo, hi, nodes[i0]);
    let upper = if i1 == n - 1 {
        if cont(gap_at_infinity) {
            f64::INFINITY
        } else {
            return Err(Error::GridTooNarrow(format!("stage {stage} continuation reaches the grid maximum")));
        }
    } else {
        let (lo, hi) = bisect_log(nodes[i1], nodes[i1 + 1], |z| cont(gap(z)));
        pick(lo, hi, nodes[i1])
    };
    let gamma = match tie {
        StopTie::Stop => 1.0,
        StopTie::Continue => 0.0,
    };
    Ok(Region { lower, upper, gamma_lower: gamma, gamma_upper: gamma })
}

fn stage_region(
    smoothed: &SmoothedValue,
    next_cost: f64,
    tie: StopTie,
    stage: usize,
) -> Result<Region> {
    let params = *smoothed.base().params();
    let gap = |z: f64| g(z, &params) - next_cost - smoothed.eval(z);
    let at_inf = params.lambda0 - next_cost - smoothed.limit_at_infinity();
    extract_region(smoothed.grid().nodes(), gap, at_inf, tie, stage)
}

/// Optimal truncated rule: at stage `k < N` continue iff
/// `g(z) > c_{k+1} + V_bar_{k+1}(z)`; stop at stage `N`.
pub fn dp_rule_truncated(ladder: &ValueLadder, tie: StopTie) -> Result<TestRule> {
    let n = ladder.horizon();
    let stages = (1..n)
        .map(|k| stage_region(ladder.smoothed(k + 1), ladder.mean_cost(k + 1), tie, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestRule {
        kind: RuleKind::Truncated,
        horizon: Some(n),
        stages,
        tail: None,
        decision_threshold: ladder.params().decision_threshold(),
        decision_tie: DecisionTie::Reject,
        stop_tie: tie,
    })
}

/// Options for [`dp_rule_stationary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryRuleOptions {
    pub stop_tie: StopTie,
    /// Boundary stop probabilities (used with [`StopTie::Stop`]; ties that
    /// continue make both boundaries continuing).
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub decision_tie: DecisionTie,
}

impl Default for StationaryRuleOptions {
    fn default() -> Self {
        Self { stop_tie: StopTie::Stop, gamma_a: 1.0, gamma_b: 1.0, decision_tie: DecisionTie::Reject }
    }
}

fn stationary_region(sol: &RhoSolution, opts: &StationaryRuleOptions) -> Result<Region> {
    match opts.stop_tie {
        StopTie::Stop => {
            let th = solve_thresholds(sol)?;
            Region::new(th.a, th.b, opts.gamma_a, opts.gamma_b)
        }
        StopTie::Continue => {
            let r = extract_region(
                sol.rho.grid().nodes(),
                |z| stopping_gap(sol, z),
                gap_at_infinity(sol),
                StopTie::Continue,
                0,
            )?;
            if r.is_empty() {
                Err(Error::TrivialDesign)
            } else {
                Ok(r)
            }
        }
    }
}

/// Optimal infinite-horizon rule for a stationary kernel: continue iff
/// `g(z) > c + rho_bar(z)`, i.e. on `(A, B)`.
pub fn dp_rule_stationary(sol: &RhoSolution, opts: &StationaryRuleOptions) -> Result<TestRule> {
    Ok(TestRule {
        kind: RuleKind::Stationary,
        horizon: None,
        stages: Vec::new(),
        tail: Some(stationary_region(sol, opts)?),
        decision_threshold: sol.params().decision_threshold(),
        decision_tie: opts.decision_tie,
        stop_tie: opts.stop_tie,
    })
}

/// Infinite-horizon rule when the first groups have their own laws: stages
/// before the stationary tail compare against their own `V_bar`.
pub fn dp_rule_prefixed(
    values: &PrefixedValues,
    kernels: &KernelSequence,
    opts: &StationaryRuleOptions,
) -> Result<TestRule> {
    let m = values.stages.len();
    let stages = (1..m)
        .map(|k| stage_region(&values.smoothed[k], kernels.stage(k + 1).mean_cost(), opts.stop_tie, k))
        .collect::<Result<Vec<_>>>()?;
    let tail = match stationary_region(&values.tail, opts) {
        Ok(r) => r,
        Err(Error::TrivialDesign) => Region::empty(),
        Err(e) => return Err(e),
    };
    Ok(TestRule {
        kind: if m == 0 { RuleKind::Stationary } else { RuleKind::Prefixed },
        horizon: None,
        stages,
        tail: Some(tail),
        decision_threshold: values.tail.params().decision_threshold(),
        decision_tie: opts.decision_tie,
        stop_tie: opts.stop_tie,
    })
}

/// A rule that stops after the first group and decides by `z` vs `threshold`.
pub fn stop_immediately(threshold: f64) -> TestRule {
    TestRule {
        kind: RuleKind::Truncated,
        horizon: Some(1),
        stages: Vec::new(),
        tail: None,
        decision_threshold: threshold,
        decision_tie: DecisionTie::Reject,
        stop_tie: StopTie::Stop,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum StagesRepr {
    Many(Vec<Region>),
    One(Region),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TiePolicies {
    #[serde(default)]
    stop: StopTie,
    #[serde(default)]
    decision: DecisionTie,
}

/// On-disk layout of a rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleFile {
    kind: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    stages: StagesRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tail: Option<Region>,
    #[serde(with = "crate::threshold_solver::extended")]
    decision_threshold: f64,
    tie_policies: TiePolicies,
}

impl From<TestRule> for RuleFile {
    fn from(r: TestRule) -> Self {
        let (stages, tail) = match (r.kind, r.tail) {
            (RuleKind::Stationary, Some(t)) if r.stages.is_empty() => (StagesRepr::One(t), None),
            _ => (StagesRepr::Many(r.stages), r.tail),
        };
        RuleFile {
            kind: r.kind,
            horizon: r.horizon,
            stages,
            tail,
            decision_threshold: r.decision_threshold,
            tie_policies: TiePolicies { stop: r.stop_tie, decision: r.decision_tie },
        }
    }
}

impl TryFrom<RuleFile> for TestRule {
    type Error = Error;

    fn try_from(f: RuleFile) -> Result<Self> {
        let (stages, tail) = match f.stages {
            StagesRepr::One(r) => (Vec::new(), Some(r)),
            StagesRepr::Many(v) => (v, f.tail),
        };
        for r in stages.iter().chain(tail.iter()) {
            if r.lower == r.upper && r.lower > 0.0 {
                continue;
            }
            Region::new(r.lower, r.upper, r.gamma_lower, r.gamma_upper)?;
        }
        match f.kind {
            RuleKind::Truncated => {
                let n = f.horizon.ok_or_else(|| Error::Parse("truncated rule needs a horizon".into()))?;
                if n == 0 {
                    return Err(Error::InvalidHorizon(0));
                }
                if stages.len() + 1 < n {
                    return Err(Error::Parse(format!("truncated rule with horizon {n} lists {} stages", stages.len())));
                }
            }
            RuleKind::Stationary | RuleKind::Prefixed => {
                if tail.is_none() {
                    return Err(Error::Parse("infinite-horizon rule needs a tail region".into()));
                }
            }
        }
        Ok(TestRule {
            kind: f.kind,
            horizon: f.horizon,
            stages,
            tail,
            decision_threshold: f.decision_threshold,
            decision_tie: f.tie_policies.decision,
            stop_tie: f.tie_policies.stop,
        })
    }
}
