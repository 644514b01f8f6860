//! Model to rule: the design steps shared by `design` and `frontier`.

use std::sync::Arc;

use rgseq::error::{Error, Result};
use rgseq::io::{ModelFile, ResolvedModel};
use rgseq::test_rules::{
    dp_rule_prefixed, dp_rule_stationary, dp_rule_truncated, stop_immediately, DecisionTie, StationaryRuleOptions,
    StopTie, TestRule,
};
use rgseq::threshold_solver::{solve_thresholds, stationary_design, Thresholds, MAX_SPAN};
use rgseq::value_iteration::{
    backward_induction, prefixed_values, DesignParams, FixedPointOptions, Grid, GridSpec, RhoSolution,
};
use serde::Serialize;

use crate::args::{DecisionTieArg, GridArgs, ModelArgs, RuleShapeArgs, StopTieArg};

pub fn load_model(args: &ModelArgs) -> Result<ResolvedModel> {
    let model = ModelFile::load(&args.model)?.resolve()?;
    match args.c {
        Some(c) => model.with_mean_cost(c),
        None => Ok(model),
    }
}

pub fn grid_spec(args: &GridArgs, model: &ResolvedModel) -> Result<GridSpec> {
    let mut spec = GridSpec::recommended(model.kernels.kernels());
    if let Some(points) = args.grid_points {
        spec.points = points;
    }
    spec.span = args.grid_span;
    if spec.points < 8 || !(spec.span > 1.0) {
        return Err(Error::InvalidParameter(format!("grid needs at least 8 points and span > 1, got {spec:?}")));
    }
    Ok(spec)
}

pub fn fixed_point_options(args: &GridArgs) -> Result<FixedPointOptions> {
    if !(args.tol > 0.0) || args.max_iter == 0 {
        return Err(Error::InvalidParameter(format!("bad tolerance {} or iteration limit {}", args.tol, args.max_iter)));
    }
    Ok(FixedPointOptions { tol: args.tol, max_iter: args.max_iter })
}

pub fn rule_options(args: &RuleShapeArgs) -> StationaryRuleOptions {
    StationaryRuleOptions {
        stop_tie: match args.stop_tie {
            StopTieArg::Stop => StopTie::Stop,
            StopTieArg::Continue => StopTie::Continue,
        },
        gamma_a: args.gamma_a,
        gamma_b: args.gamma_b,
        decision_tie: match args.decision_tie {
            DecisionTieArg::Reject => DecisionTie::Reject,
            DecisionTieArg::Accept => DecisionTie::Accept,
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridInfo {
    pub points: usize,
    pub min_z: f64,
    pub max_z: f64,
    pub step: f64,
    pub lattice: Option<f64>,
}

impl GridInfo {
    fn of(grid: &Grid) -> Self {
        Self { points: grid.len(), min_z: grid.min_z(), max_z: grid.max_z(), step: grid.step(), lattice: grid.lattice() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointInfo {
    pub iterations: usize,
    pub final_residual: f64,
}

impl FixedPointInfo {
    pub fn of(sol: &RhoSolution) -> Self {
        Self { iterations: sol.iterations, final_residual: sol.residuals.last().copied().unwrap_or(0.0) }
    }
}

/// A designed rule with what was learned on the way.
#[derive(Debug, Clone, Serialize)]
pub struct Designed {
    pub lambda0: f64,
    pub lambda1: f64,
    /// Mean cost per group in the stationary tail.
    pub c: f64,
    pub trivial: bool,
    pub thresholds: Option<Thresholds>,
    /// `c_1 + V_bar_1(1)`: the smallest attainable Lagrangian.
    pub lower_bound: f64,
    pub grid: GridInfo,
    pub fixed_point: Option<FixedPointInfo>,
    pub warnings: Vec<String>,
    pub rule: TestRule,
}

fn trivial_rule(params: &DesignParams, opts: &StationaryRuleOptions) -> TestRule {
    let mut rule = stop_immediately(params.decision_threshold());
    rule.decision_tie = opts.decision_tie;
    rule
}

/// Rule from a converged stationary solution.
pub fn from_solution(
    sol: &RhoSolution,
    thresholds: Result<Thresholds>,
    opts: &StationaryRuleOptions,
) -> Result<Designed> {
    let p = *sol.params();
    let mut warnings = Vec::new();
    let (rule, thresholds, trivial) = match thresholds {
        Ok(th) => {
            warnings.extend(th.warnings.iter().cloned());
            (dp_rule_stationary(sol, opts)?, Some(th), false)
        }
        Err(Error::TrivialDesign) => match dp_rule_stationary(sol, opts) {
            // stopping and continuing tie at the start; continuing on ties still gives a rule
            Ok(rule) if opts.stop_tie == StopTie::Continue => {
                warnings.push("stopping at once is also optimal; ties continue".into());
                (rule, None, true)
            }
            _ => {
                warnings.push("trivial design: stopping after the first group is optimal".into());
                (trivial_rule(&p, opts), None, true)
            }
        },
        Err(e) => return Err(e),
    };
    Ok(Designed {
        lambda0: p.lambda0,
        lambda1: p.lambda1,
        c: sol.c,
        trivial,
        thresholds,
        lower_bound: sol.lagrangian_lower_bound(),
        grid: GridInfo::of(sol.rho.grid()),
        fixed_point: Some(FixedPointInfo::of(sol)),
        warnings,
        rule,
    })
}

/// Optimal infinite-horizon rule, or the optimal rule truncated at `horizon`.
pub fn design_rule(
    model: &ResolvedModel,
    params: &DesignParams,
    spec: &GridSpec,
    fp: &FixedPointOptions,
    opts: &StationaryRuleOptions,
    horizon: Option<usize>,
) -> Result<Designed> {
    let kernels = &model.kernels;
    if let Some(n) = horizon {
        return design_truncated(model, params, spec, opts, n);
    }
    if kernels.is_stationary() {
        let (sol, th) = stationary_design(kernels.tail(), params, spec, fp)?;
        return from_solution(&sol, th, opts);
    }
    let mut spec = *spec;
    loop {
        let grid = Arc::new(Grid::for_kernels(&spec, params, kernels.kernels())?);
        let values = prefixed_values(kernels, params, grid.clone(), fp)?;
        match dp_rule_prefixed(&values, kernels, opts) {
            Err(Error::GridTooNarrow(_)) if spec.span < MAX_SPAN => spec = spec.widened(),
            rule => {
                let thresholds = solve_thresholds(&values.tail).ok();
                let mut warnings: Vec<String> = thresholds.iter().flat_map(|t| t.warnings.clone()).collect();
                if thresholds.is_none() {
                    warnings.push("the stationary tail has no continuation region".into());
                }
                return Ok(Designed {
                    lambda0: params.lambda0,
                    lambda1: params.lambda1,
                    c: kernels.tail().mean_cost(),
                    trivial: false,
                    thresholds,
                    lower_bound: values.lower_bound,
                    grid: GridInfo::of(&grid),
                    fixed_point: Some(FixedPointInfo::of(&values.tail)),
                    warnings,
                    rule: rule?,
                });
            }
        }
    }
}

fn design_truncated(
    model: &ResolvedModel,
    params: &DesignParams,
    spec: &GridSpec,
    opts: &StationaryRuleOptions,
    horizon: usize,
) -> Result<Designed> {
    let mut spec = *spec;
    loop {
        let grid = Arc::new(Grid::for_kernels(&spec, params, model.kernels.kernels())?);
        let ladder = backward_induction(&model.kernels, params, horizon, grid.clone())?;
        match dp_rule_truncated(&ladder, opts.stop_tie) {
            Err(Error::GridTooNarrow(_)) if spec.span < MAX_SPAN => spec = spec.widened(),
            rule => {
                let mut rule = rule?;
                rule.decision_tie = opts.decision_tie;
                return Ok(Designed {
                    lambda0: params.lambda0,
                    lambda1: params.lambda1,
                    c: model.kernels.tail().mean_cost(),
                    trivial: rule.stages.iter().all(|r| r.is_empty()),
                    thresholds: None,
                    lower_bound: ladder.lower_bound(),
                    grid: GridInfo::of(&grid),
                    fixed_point: None,
                    warnings: Vec::new(),
                    rule,
                });
            }
        }
    }
}
