//! Multipliers whose optimal rule meets error-probability targets.
//!
//! `alpha` falls as `lambda0` grows and `beta` as `lambda1` grows, so the
//! search bisects `lambda0` for the `alpha` target inside a bisection of
//! `lambda1` for the `beta` target, each bracket found by expanding upward
//! from the smallest multiplier. Every probe is evaluated exactly, so the
//! returned design is checked regardless of whether the monotonicity holds.

use rgseq::error::Error;
use rgseq::evaluator::{exact_oc, ExactOptions, OperatingCharacteristics};
use rgseq::io::ResolvedModel;
use rgseq::test_rules::StationaryRuleOptions;
use rgseq::value_iteration::{DesignParams, FixedPointOptions, GridSpec};
use serde::Serialize;

use crate::args::FrontierArgs;
use crate::commands::{write_json, Failure, Outcome};
use crate::pipeline::{design_rule, fixed_point_options, grid_spec, load_model, Designed};

/// Bracket expansion factor.
const GROWTH: f64 = 4.0;

fn no_design(lambda1: f64) -> Failure {
    Failure { code: 3, message: format!("no representable design for lambda1 = {lambda1}") }
}

#[derive(Debug, Clone, Serialize)]
struct Probe {
    lambda0: f64,
    lambda1: f64,
    /// Error bounds counting mass left at the cap as errors.
    alpha_bound: f64,
    beta_bound: f64,
    #[serde(skip)]
    oc: OperatingCharacteristics,
    #[serde(skip)]
    design: Designed,
}

struct Search<'a> {
    model: &'a ResolvedModel,
    spec: GridSpec,
    fp: FixedPointOptions,
    opts: StationaryRuleOptions,
    exact: ExactOptions,
    alpha: f64,
    beta: f64,
    rel_tol: f64,
    probes: Vec<Probe>,
}

impl Search<'_> {
    /// `None` when the upper threshold lies beyond every representable grid,
    /// which happens once `lambda0 / c` is large.
    fn probe(&mut self, lambda0: f64, lambda1: f64) -> Result<Option<Probe>, Failure> {
        let params = DesignParams::new(lambda0, lambda1)?;
        let design = match design_rule(self.model, &params, &self.spec, &self.fp, &self.opts, None) {
            Ok(d) => d,
            Err(Error::GridTooNarrow(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let oc = exact_oc(&design.rule, &self.model.kernels, &self.exact)?;
        let p = Probe {
            lambda0,
            lambda1,
            alpha_bound: oc.alpha + oc.truncation_mass[0],
            beta_bound: oc.beta + oc.truncation_mass[1],
            oc,
            design,
        };
        self.probes.push(p.clone());
        Ok(Some(p))
    }

    fn alpha_ok(&self, p: &Probe) -> bool {
        p.alpha_bound <= self.alpha
    }

    fn feasible(&self, p: &Probe) -> bool {
        p.alpha_bound <= self.alpha && p.beta_bound <= self.beta
    }

    /// Smallest `lambda0 >= lo` meeting the `alpha` target at this `lambda1`:
    /// expand by [`GROWTH`] until the target is met, then bisect the last step.
    fn inner(&mut self, lambda1: f64, lo: f64, hi: f64) -> Result<Probe, Failure> {
        let mut below = None;
        let mut l = lo;
        let (mut lo_ok, mut hi_ok, mut best) = loop {
            match self.probe(l, lambda1)? {
                Some(p) if self.alpha_ok(&p) => {
                    if l == lo {
                        return Ok(p);
                    }
                    break (l / GROWTH, l, Some(p));
                }
                // errors vanish as lambda0 grows; unrepresentable designs lie above
                None => break (l / GROWTH, l, None),
                Some(p) => below = Some(p),
            }
            if l >= hi {
                return below.ok_or_else(|| no_design(lambda1));
            }
            l = (l * GROWTH).min(hi);
        };
        while hi_ok / lo_ok - 1.0 > self.rel_tol {
            let mid = (lo_ok * hi_ok).sqrt();
            match self.probe(mid, lambda1)? {
                Some(p) if self.alpha_ok(&p) => {
                    hi_ok = mid;
                    best = Some(p);
                }
                None => hi_ok = mid,
                Some(p) => {
                    lo_ok = mid;
                    below = Some(p);
                }
            }
        }
        best.or(below).ok_or_else(|| no_design(lambda1))
    }

    /// Smallest `lambda1 >= lo` whose inner design meets both targets.
    fn outer(&mut self, lo: f64, hi: f64) -> Result<Probe, Failure> {
        let mut l = lo;
        let mut last;
        loop {
            let p = self.inner(l, lo, hi)?;
            let ok = self.feasible(&p);
            last = p;
            if ok {
                break;
            }
            if l >= hi {
                return Ok(last);
            }
            l = (l * GROWTH).min(hi);
        }
        if l == lo {
            return Ok(last);
        }
        let (mut lo_ok, mut hi_ok, mut best) = (l / GROWTH, l, last);
        while hi_ok / lo_ok - 1.0 > self.rel_tol {
            let mid = (lo_ok * hi_ok).sqrt();
            let p = self.inner(mid, lo, hi)?;
            if self.feasible(&p) {
                hi_ok = mid;
                best = p;
            } else {
                lo_ok = mid;
            }
        }
        Ok(best)
    }

    /// Probe closest to the targets.
    fn best_effort(&self) -> Probe {
        let excess = |p: &Probe| (p.alpha_bound / self.alpha).max(p.beta_bound / self.beta);
        self.probes
            .iter()
            .min_by(|a, b| excess(a).total_cmp(&excess(b)))
            .cloned()
            .expect("at least one probe")
    }
}

#[derive(Serialize)]
struct FrontierReport<'a> {
    command: &'static str,
    config: &'a FrontierArgs,
    /// `met` when the returned design meets both targets, else `best_effort`.
    status: &'static str,
    probes: usize,
    lambda0: f64,
    lambda1: f64,
    alpha: f64,
    beta: f64,
    #[serde(rename = "K0")]
    k0: f64,
    #[serde(rename = "K1")]
    k1: f64,
    #[serde(rename = "E_tau_0")]
    e_tau0: f64,
    #[serde(rename = "E_tau_1")]
    e_tau1: f64,
    truncation_mass: [f64; 2],
    design: &'a Designed,
}

pub fn frontier(args: &FrontierArgs) -> Result<Outcome, Failure> {
    for (name, v) in [("alpha", args.alpha), ("beta", args.beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Failure::config(format!("--{name} must lie in (0, 1), got {v}")));
        }
    }
    if !(args.lambda_min > 0.0 && args.lambda_min < args.lambda_max && args.lambda_max.is_finite()) {
        return Err(Failure::config("need 0 < --lambda-min < --lambda-max < inf"));
    }
    if !(args.search_tol > 0.0) {
        return Err(Failure::config("--search-tol must be positive"));
    }
    let model = load_model(&args.model)?;
    let mut search = Search {
        model: &model,
        spec: grid_spec(&args.grid, &model)?,
        fp: fixed_point_options(&args.grid)?,
        opts: StationaryRuleOptions::default(),
        exact: ExactOptions { cap: args.cap, ..Default::default() },
        alpha: args.alpha,
        beta: args.beta,
        rel_tol: args.search_tol,
        probes: Vec::new(),
    };
    let found = match search.probe(args.lambda_min, args.lambda_min)? {
        Some(first) if search.feasible(&first) => first,
        _ => search.outer(args.lambda_min, args.lambda_max)?,
    };
    let (status, chosen) = if search.feasible(&found) { ("met", found) } else { ("best_effort", search.best_effort()) };
    let report = FrontierReport {
        command: "frontier",
        config: args,
        status,
        probes: search.probes.len(),
        lambda0: chosen.lambda0,
        lambda1: chosen.lambda1,
        alpha: chosen.oc.alpha,
        beta: chosen.oc.beta,
        k0: chosen.oc.k0,
        k1: chosen.oc.k1,
        e_tau0: chosen.oc.e_tau0,
        e_tau1: chosen.oc.e_tau1,
        truncation_mass: chosen.oc.truncation_mass,
        design: &chosen.design,
    };
    if status != "met" {
        eprintln!(
            "warning: targets not met; best probe has alpha <= {:e}, beta <= {:e}",
            chosen.alpha_bound, chosen.beta_bound
        );
    }
    if let Some(path) = &args.rule_out {
        write_json(&chosen.design.rule, Some(path))?;
    }
    write_json(&report, args.out.as_deref())?;
    Ok(if status == "met" { Outcome::Success } else { Outcome::BestEffort })
}
