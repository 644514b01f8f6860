//! Value functions of the Lagrangian stopping problem.
//!
//! With multipliers `lambda0` (on the type I error) and `lambda1` (on the
//! type II error) the terminal loss at likelihood ratio `z` is
//! `g(z) = min(lambda0, lambda1 * z)`. Finite-horizon values follow the
//! backward recursion
//!
//! ```text
//! V_N(z)     = g(z)
//! V_{k-1}(z) = min( g(z), c_k + sum_n p_k(n) E0 V_k(z z_n) )
//! ```
//!
//! and in the stationary case the iterates `rho_k` of the same map decrease
//! to the infinite-horizon value `rho`.
//!
//! Functions are stored on a log-spaced grid of `z` and interpolated linearly
//! in `z`, which preserves concavity. Outside the grid every value function
//! equals `g`. When all log-likelihood ratios of the kernels lie on a common
//! lattice the grid step divides the lattice step, so the smoothing operator
//! maps grid nodes to grid nodes and is exact there.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KernelSequence, StageKernel};

/// Fractional grid positions closer than this to an integer are snapped.
const SNAP_TOL: f64 = 1e-9;
/// Largest denominator tried when looking for a common lattice step.
const MAX_LATTICE_DENOMINATOR: u32 = 64;

/// Lagrange multipliers on the type I and type II error probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl DesignParams {
    pub fn new(lambda0: f64, lambda1: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite() && lambda1 > 0.0 && lambda1.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "multipliers must be positive and finite (lambda0={lambda0}, lambda1={lambda1})"
            )));
        }
        Ok(Self { lambda0, lambda1 })
    }

    /// Normalised form with `lambda1 = 1`.
    pub fn normalized(lambda: f64) -> Result<Self> {
        Self::new(lambda, 1.0)
    }

    /// The ratio `lambda0 / lambda1` where `g` has its kink.
    pub fn decision_threshold(&self) -> f64 {
        self.lambda0 / self.lambda1
    }
}

/// Terminal loss `g(z) = min(lambda0, lambda1 z)`, with `g(+inf) = lambda0`.
pub fn g(z: f64, params: &DesignParams) -> f64 {
    if z == f64::INFINITY {
        params.lambda0
    } else {
        params.lambda0.min(params.lambda1 * z)
    }
}

/// Grid construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Approximate number of nodes.
    pub points: usize,
    /// The grid covers `[d / span, d * span]` with `d = lambda0 / lambda1`.
    pub span: f64,
    /// Nodes sit at `anchor * exp(j * step)` for integer `j`.
    pub anchor: f64,
}

/// Largest span reached by [`GridSpec::widened`].
pub const MAX_GRID_SPAN: f64 = 1e200;

/// Grid size used for non-lattice likelihood-ratio laws.
pub const NON_LATTICE_POINTS: usize = 32_768;

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 2048, span: 1e6, anchor: 1.0 }
    }
}

impl GridSpec {
    /// Same node spacing over the squared span (`[d / span^2, d * span^2]`),
    /// capped at [`MAX_GRID_SPAN`].
    pub fn widened(&self) -> Self {
        let span = (self.span * self.span).min(MAX_GRID_SPAN);
        let ratio = span.ln() / self.span.ln();
        let points = ((self.points - 1) as f64 * ratio).round() as usize + 1;
        Self { points, span, anchor: self.anchor }
    }

    /// Default spec for `kernels`: linear interpolation is exact between
    /// lattice points, so only non-lattice laws need the finer grid.
    pub fn recommended<'a>(kernels: impl IntoIterator<Item = &'a StageKernel>) -> Self {
        let logs: Vec<f64> =
            kernels.into_iter().flat_map(|k| k.group_lr().atoms().iter().map(|a| a.log_lr)).collect();
        match detect_lattice(&logs) {
            Some(_) => Self::default(),
            None => Self { points: NON_LATTICE_POINTS, ..Self::default() },
        }
    }
}

/// Log-spaced grid of likelihood-ratio values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    log_anchor: f64,
    step: f64,
    first: i64,
    z: Vec<f64>,
    lattice: Option<f64>,
}

/// Largest `delta` such that every value is an integer multiple of it.
fn detect_lattice(log_lrs: &[f64]) -> Option<f64> {
    let vals: Vec<f64> = log_lrs.iter().copied().filter(|v| v.is_finite() && v.abs() > 1e-12).collect();
    let base = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !base.is_finite() {
        return None;
    }
    (1..=MAX_LATTICE_DENOMINATOR).map(|k| base / k as f64).find(|delta| {
        vals.iter().all(|v| {
            let r = v / delta;
            (r - r.round()).abs() < 1e-8
        })
    })
}

impl Grid {
    /// Builds a grid centred on `lambda0 / lambda1`, aligned to the lattice
    /// of `log_lrs` when one exists.
    pub fn build(spec: &GridSpec, params: &DesignParams, log_lrs: &[f64]) -> Result<Self> {
        if spec.points < 8 || !(spec.span > 1.0) || !(spec.anchor > 0.0) {
            return Err(Error::InvalidParameter(format!("bad grid spec {spec:?}")));
        }
        let log_span = spec.span.ln();
        let target = 2.0 * log_span / (spec.points - 1) as f64;
        let lattice = detect_lattice(log_lrs);
        let step = match lattice {
            Some(delta) => delta / (delta / target).ceil(),
            None => target,
        };
        let log_anchor = spec.anchor.ln();
        let centre = params.decision_threshold().ln();
        let first = ((centre - log_span - log_anchor) / step).floor() as i64;
        let last = ((centre + log_span - log_anchor) / step).ceil() as i64;
        let z = (first..=last).map(|j| (log_anchor + j as f64 * step).exp()).collect();
        Ok(Self { log_anchor, step, first, z, lattice })
    }

    /// Grid for all log-likelihood ratios appearing in `kernels`.
    pub fn for_kernels<'a>(
        spec: &GridSpec,
        params: &DesignParams,
        kernels: impl IntoIterator<Item = &'a StageKernel>,
    ) -> Result<Self> {
        let logs: Vec<f64> = kernels
            .into_iter()
            .flat_map(|k| k.group_lr().atoms().iter().map(|a| a.log_lr))
            .collect();
        Self::build(spec, params, &logs)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn lattice(&self) -> Option<f64> {
        self.lattice
    }

    pub fn min_z(&self) -> f64 {
        self.z[0]
    }

    pub fn max_z(&self) -> f64 {
        self.z[self.z.len() - 1]
    }

    pub fn log_node(&self, i: usize) -> f64 {
        self.log_anchor + (self.first + i as i64) as f64 * self.step
    }

    /// Fractional node index of `log z`, snapped to an integer when close.
    fn position(&self, log_z: f64) -> f64 {
        snap((log_z - self.log_anchor) / self.step - self.first as f64)
    }

    /// Index `i` with `z_i <= z < z_{i+1}`, if `z` lies inside the grid.
    pub fn cell_of(&self, z: f64) -> Option<usize> {
        let t = self.position(z.ln());
        if t < 0.0 || t > (self.len() - 1) as f64 {
            None
        } else {
            Some((t.floor() as usize).min(self.len() - 2))
        }
    }

    fn interp_weight(&self, frac: f64) -> f64 {
        (frac * self.step).exp_m1() / self.step.exp_m1()
    }
}

fn snap(t: f64) -> f64 {
    let r = t.round();
    if (t - r).abs() < SNAP_TOL {
        r
    } else {
        t
    }
}

/// Interpolation recipe for evaluating `V(z_i * exp(l))` at every node `i`.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    log_lr: f64,
    p0: f64,
    offset: i64,
    weight: f64,
}

fn stencils(grid: &Grid, kernel: &StageKernel) -> Vec<Stencil> {
    kernel
        .group_lr()
        .atoms()
        .iter()
        // The +inf atom has no mass under H0.
        .filter(|a| a.p0 > 0.0)
        .map(|a| {
            if a.log_lr == f64::NEG_INFINITY {
                return Stencil { log_lr: a.log_lr, p0: a.p0, offset: 0, weight: 0.0 };
            }
            let shift = snap(a.log_lr / grid.step);
            let offset = shift.floor();
            let frac = shift - offset;
            let weight = if frac == 0.0 { 0.0 } else { grid.interp_weight(frac) };
            Stencil { log_lr: a.log_lr, p0: a.p0, offset: offset as i64, weight }
        })
        .collect()
}

/// A nondecreasing concave function of `z >= 0` stored on a grid, equal to
/// `g` below it and to its limit at infinity above it.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
    params: DesignParams,
    upper: f64,
}

impl ValueFunction {
    /// The terminal loss `g` sampled on `grid`.
    pub fn payoff(grid: Arc<Grid>, params: DesignParams) -> Self {
        let values = grid.nodes().iter().map(|z| g(*z, &params)).collect();
        Self { grid, values, params, upper: params.lambda0 }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn params(&self) -> &DesignParams {
        &self.params
    }

    /// `lim_{z -> inf} V(z)`, used above the grid.
    pub fn limit_at_infinity(&self) -> f64 {
        self.upper
    }

    pub fn eval(&self, z: f64) -> f64 {
        if z == 0.0 {
            0.0
        } else {
            self.eval_log(z.ln())
        }
    }

    /// Value at `exp(log_z)`; `-inf` maps to `V(0) = 0`, `+inf` to the limit.
    pub fn eval_log(&self, log_z: f64) -> f64 {
        if log_z == f64::NEG_INFINITY {
            return 0.0;
        }
        if log_z == f64::INFINITY {
            return self.upper;
        }
        let t = self.grid.position(log_z);
        let n = self.values.len();
        if t < 0.0 {
            return g(log_z.exp(), &self.params);
        }
        if t > (n - 1) as f64 {
            return self.upper;
        }
        let j = t.floor() as usize;
        let frac = t - j as f64;
        if frac == 0.0 || j == n - 1 {
            return self.values[j];
        }
        let w = self.grid.interp_weight(frac);
        self.values[j] + w * (self.values[j + 1] - self.values[j])
    }

    fn at_stencil(&self, i: usize, s: &Stencil) -> f64 {
        if s.log_lr == f64::NEG_INFINITY {
            return 0.0;
        }
        let j = i as i64 + s.offset;
        let n = self.values.len() as i64;
        if j < 0 {
            return g((self.grid.log_node(i) + s.log_lr).exp(), &self.params);
        }
        if j > n - 1 || (j == n - 1 && s.weight != 0.0) {
            return self.upper;
        }
        let j = j as usize;
        if s.weight == 0.0 {
            self.values[j]
        } else {
            self.values[j] + s.weight * (self.values[j + 1] - self.values[j])
        }
    }

    /// Largest violation of `0 <= V <= g` over the nodes.
    pub fn bound_violation(&self) -> f64 {
        self.grid
            .nodes()
            .iter()
            .zip(&self.values)
            .map(|(z, v)| (-v).max(v - g(*z, &self.params)).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// One-step expectation `V_bar(z) = sum_n p(n) E0 V(z z_n)` of a value
/// function under a stage kernel.
#[derive(Debug, Clone)]
pub struct SmoothedValue {
    base: ValueFunction,
    stencils: Vec<Stencil>,
    values: Vec<f64>,
}

impl SmoothedValue {
    /// Values at the grid nodes.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.base.grid()
    }

    /// The function that was smoothed.
    pub fn base(&self) -> &ValueFunction {
        &self.base
    }

    /// Exact expectation at any `z >= 0` (interpolating the base function).
    pub fn eval(&self, z: f64) -> f64 {
        if z == 0.0 {
            return 0.0;
        }
        let log_z = z.ln();
        self.stencils
            .iter()
            .map(|s| {
                let v = if s.log_lr == f64::NEG_INFINITY {
                    0.0
                } else {
                    self.base.eval_log(log_z + s.log_lr)
                };
                s.p0 * v
            })
            .sum()
    }

    /// `lim_{z -> inf} V_bar(z) = P0(z_n > 0) lim_{z -> inf} V(z)`.
    pub fn limit_at_infinity(&self) -> f64 {
        upper_smoothed(&self.base, &self.stencils)
    }
}

/// Applies the smoothing operator of `kernel` to `v`.
pub fn smooth(v: &ValueFunction, kernel: &StageKernel) -> SmoothedValue {
    let st = stencils(&v.grid, kernel);
    let values = smooth_nodes(v, &st);
    SmoothedValue { base: v.clone(), stencils: st, values }
}

fn upper_smoothed(v: &ValueFunction, st: &[Stencil]) -> f64 {
    st.iter().filter(|s| s.log_lr > f64::NEG_INFINITY).map(|s| s.p0 * v.upper).sum()
}

fn smooth_nodes(v: &ValueFunction, st: &[Stencil]) -> Vec<f64> {
    (0..v.values.len())
        .map(|i| st.iter().map(|s| s.p0 * v.at_stencil(i, s)).sum())
        .collect()
}

/// One Bellman step `min(g, cost + V_bar)`; also returns `V_bar` on the nodes.
fn bellman(v: &ValueFunction, st: &[Stencil], cost: f64) -> (ValueFunction, Vec<f64>) {
    let smoothed = smooth_nodes(v, st);
    let values = v
        .grid
        .nodes()
        .iter()
        .zip(&smoothed)
        .map(|(z, s)| g(*z, &v.params).min(cost + s))
        .collect();
    let upper = v.params.lambda0.min(cost + upper_smoothed(v, st));
    (ValueFunction { grid: v.grid.clone(), values, params: v.params, upper }, smoothed)
}

/// Value functions `V_1^N, ..., V_N^N` with their smoothed versions.
#[derive(Debug, Clone)]
pub struct ValueLadder {
    params: DesignParams,
    stages: Vec<ValueFunction>,
    smoothed: Vec<SmoothedValue>,
    mean_costs: Vec<f64>,
    lower_bound: f64,
}

impl ValueLadder {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn params(&self) -> &DesignParams {
        &self.params
    }

    /// `V_k^N` for `k` in `1..=N`.
    pub fn stage(&self, k: usize) -> &ValueFunction {
        &self.stages[k - 1]
    }

    /// `V_bar_k^N` for `k` in `1..=N`.
    pub fn smoothed(&self, k: usize) -> &SmoothedValue {
        &self.smoothed[k - 1]
    }

    /// Mean cost of group `k`.
    pub fn mean_cost(&self, k: usize) -> f64 {
        self.mean_costs[k - 1]
    }

    /// `c_1 + V_bar_1^N(1)`, the minimum of the truncated Lagrangian.
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }
}

/// Finite-horizon backward induction over the stage kernels of `kernels`.
pub fn backward_induction(
    kernels: &KernelSequence,
    params: &DesignParams,
    horizon: usize,
    grid: Arc<Grid>,
) -> Result<ValueLadder> {
    if horizon == 0 {
        return Err(Error::InvalidHorizon(horizon));
    }
    let mut stages = vec![ValueFunction::payoff(grid, *params)];
    let mut smoothed_rev = Vec::with_capacity(horizon);
    for k in (2..=horizon).rev() {
        let kernel = kernels.stage(k);
        let st = stencils(stages.last().unwrap().grid(), kernel);
        let current = stages.last().unwrap();
        let (prev, sm) = bellman(current, &st, kernel.mean_cost());
        smoothed_rev.push(SmoothedValue { base: current.clone(), stencils: st, values: sm });
        stages.push(prev);
    }
    smoothed_rev.push(smooth(stages.last().unwrap(), kernels.stage(1)));
    stages.reverse();
    smoothed_rev.reverse();
    let mean_costs: Vec<f64> = (1..=horizon).map(|k| kernels.stage(k).mean_cost()).collect();
    let lower_bound = mean_costs[0] + smoothed_rev[0].eval(1.0);
    Ok(ValueLadder { params: *params, stages, smoothed: smoothed_rev, mean_costs, lower_bound })
}

/// Stopping tolerance and iteration budget for the stationary fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000 }
    }
}

/// Converged stationary value `rho` and its smoothing `rho_bar`.
#[derive(Debug, Clone)]
pub struct RhoSolution {
    pub rho: ValueFunction,
    pub rho_bar: SmoothedValue,
    /// Per-group cost used in the recursion.
    pub c: f64,
    pub iterations: usize,
    /// Sup-norm change between consecutive iterates.
    pub residuals: Vec<f64>,
    /// Largest observed increase `rho_k - rho_{k-1}` (zero in exact arithmetic).
    pub monotonicity_violation: f64,
}

impl RhoSolution {
    pub fn params(&self) -> &DesignParams {
        self.rho.params()
    }

    /// `c + rho_bar(1)`, the infimum of the Lagrangian over all stopping rules.
    pub fn lagrangian_lower_bound(&self) -> f64 {
        self.c + self.rho_bar.eval(1.0)
    }
}

fn check_cost(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("per-group cost must be positive, got {c}")));
    }
    Ok(())
}

/// The iterates `rho_0 = g, rho_1, ..., rho_count`.
pub fn rho_iterates(
    kernel: &StageKernel,
    c: f64,
    params: &DesignParams,
    count: usize,
    grid: Arc<Grid>,
) -> Result<Vec<ValueFunction>> {
    check_cost(c)?;
    let mut out = vec![ValueFunction::payoff(grid, *params)];
    let st = stencils(out[0].grid(), kernel);
    for _ in 0..count {
        let (next, _) = bellman(out.last().unwrap(), &st, c);
        out.push(next);
    }
    Ok(out)
}

/// Iterates `rho_k = min(g, c + rho_bar_{k-1})` from `rho_0 = g` until the
/// sup-norm change drops below `opts.tol`.
pub fn rho_fixed_point(
    kernel: &StageKernel,
    c: f64,
    params: &DesignParams,
    grid: Arc<Grid>,
    opts: &FixedPointOptions,
) -> Result<RhoSolution> {
    check_cost(c)?;
    let mut current = ValueFunction::payoff(grid, *params);
    let st = stencils(current.grid(), kernel);
    let mut residuals = Vec::new();
    let mut violation = 0.0f64;
    for iter in 1..=opts.max_iter {
        let (next, _) = bellman(&current, &st, c);
        let mut residual = 0.0f64;
        for (a, b) in next.values.iter().zip(&current.values) {
            residual = residual.max((a - b).abs());
            violation = violation.max(a - b);
        }
        residual = residual.max((next.upper - current.upper).abs());
        residuals.push(residual);
        current = next;
        if residual < opts.tol {
            let rho_bar = SmoothedValue { values: smooth_nodes(&current, &st), base: current.clone(), stencils: st };
            return Ok(RhoSolution {
                rho: current,
                rho_bar,
                c,
                iterations: iter,
                residuals,
                monotonicity_violation: violation,
            });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: *residuals.last().unwrap_or(&f64::NAN) })
}

/// Convenience wrapper: stationary solution with `lambda1 = 1` on a default grid.
pub fn solve_stationary(kernel: &StageKernel, c: f64, lambda: f64, spec: &GridSpec) -> Result<RhoSolution> {
    let params = DesignParams::normalized(lambda)?;
    let grid = Arc::new(Grid::for_kernels(spec, &params, [kernel])?);
    rho_fixed_point(kernel, c, &params, grid, &FixedPointOptions::default())
}

/// Infinite-horizon values when the first groups follow their own laws.
///
/// From stage `m = prefix length` onward the future is stationary, so
/// `V_m = rho` for the tail kernel and earlier stages follow the backward
/// recursion.
#[derive(Debug, Clone)]
pub struct PrefixedValues {
    /// `V_1, ..., V_m` (empty when stationary).
    pub stages: Vec<ValueFunction>,
    /// `V_bar_1, ..., V_bar_m`.
    pub smoothed: Vec<SmoothedValue>,
    pub tail: RhoSolution,
    pub lower_bound: f64,
}

pub fn prefixed_values(
    kernels: &KernelSequence,
    params: &DesignParams,
    grid: Arc<Grid>,
    opts: &FixedPointOptions,
) -> Result<PrefixedValues> {
    let tail = rho_fixed_point(kernels.tail(), kernels.tail().mean_cost(), params, grid, opts)?;
    let m = kernels.prefix().len();
    if m == 0 {
        let lower_bound = tail.lagrangian_lower_bound();
        return Ok(PrefixedValues { stages: Vec::new(), smoothed: Vec::new(), tail, lower_bound });
    }
    let mut stages = vec![tail.rho.clone()];
    let mut smoothed_rev = Vec::new();
    for k in (2..=m).rev() {
        let kernel = kernels.stage(k);
        let current = stages.last().unwrap();
        let st = stencils(current.grid(), kernel);
        let (prev, sm) = bellman(current, &st, kernel.mean_cost());
        smoothed_rev.push(SmoothedValue { base: current.clone(), stencils: st, values: sm });
        stages.push(prev);
    }
    smoothed_rev.push(smooth(stages.last().unwrap(), kernels.stage(1)));
    stages.reverse();
    smoothed_rev.reverse();
    let lower_bound = kernels.stage(1).mean_cost() + smoothed_rev[0].eval(1.0);
    Ok(PrefixedValues { stages, smoothed: smoothed_rev, tail, lower_bound })
}

/// Largest positive second divided difference of `values` over `nodes`
/// (zero or negative for concave data).
pub fn concavity_defect(nodes: &[f64], values: &[f64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 1..nodes.len() - 1 {
        let left = (values[i] - values[i - 1]) / (nodes[i] - nodes[i - 1]);
        let right = (values[i + 1] - values[i]) / (nodes[i + 1] - nodes[i]);
        worst = worst.max(right - left);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, make_stage_kernel, CostModel};

    fn kernel(f0: &[f64], f1: &[f64]) -> StageKernel {
        let m = make_model(f0, f1).unwrap();
        make_stage_kernel(&m, &[1], &[1.0], &CostModel::Constant { a: 1.0 }, 1e-12, 1000).unwrap()
    }

    #[test]
    fn payoff_values() {
        let p = DesignParams::new(2.0, 1.0).unwrap();
        assert_eq!(g(0.0, &p), 0.0);
        assert_eq!(g(3.0, &p), 2.0);
        let p5 = DesignParams::new(5.0, 1.0).unwrap();
        assert_eq!(g(f64::INFINITY, &p5), 5.0);
    }

    #[test]
    fn invalid_multipliers() {
        assert!(DesignParams::new(0.0, 1.0).is_err());
        assert!(DesignParams::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn lattice_detection() {
        let d = (7.0f64 / 3.0).ln();
        assert!((detect_lattice(&[-d, d, 2.0 * d, 0.0]).unwrap() - d).abs() < 1e-15);
        assert!((detect_lattice(&[f64::NEG_INFINITY, 2f64.ln()]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(detect_lattice(&[1.0, 2f64.sqrt()]).is_none());
    }

    #[test]
    fn aligned_grid_hits_lattice_nodes() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(5.0, 1.0).unwrap();
        let grid = Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap();
        let delta = grid.lattice().unwrap();
        let per = (delta / grid.step()).round();
        assert!((per * grid.step() - delta).abs() < 1e-13);
        assert!(grid.min_z() <= 5e-6 && grid.max_z() >= 5e6);
        assert!(grid.len() >= 2048 && grid.len() < 2200);
        // z = 1 is a node
        assert!(grid.nodes().iter().any(|z| (z - 1.0).abs() < 1e-15));
    }

    #[test]
    fn smoothing_zero_function() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(4.0, 4.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let zero = ValueFunction { grid: grid.clone(), values: vec![0.0; grid.len()], params: p, upper: 0.0 };
        let s = smooth(&zero, &k);
        // shifted nodes leaving the grid pick up the extension rule V = g
        let n = grid.len();
        assert!(s.values()[100..n - 100].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smoothing_payoff_bernoulli_at_one() {
        // 0.7 * g(3/7) + 0.3 * g(7/3) with g = min(4, 4z)
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(4.0, 4.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let s = smooth(&ValueFunction::payoff(grid, p), &k);
        assert!((s.eval(1.0) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn smoothing_payoff_uniform_counterexample() {
        let k = kernel(&[0.5, 0.5], &[1.0, 0.0]);
        let p = DesignParams::new(2.0, 1.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let s = smooth(&ValueFunction::payoff(grid.clone(), p), &k);
        for (z, v) in grid.nodes().iter().zip(s.values()) {
            assert!((v - z.min(1.0)).abs() < 1e-12, "z={z} v={v}");
        }
        assert_eq!(s.limit_at_infinity(), 1.0);
    }

    #[test]
    fn two_stage_value_at_one() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(4.0, 4.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let ladder = backward_induction(&KernelSequence::stationary(k), &p, 2, grid).unwrap();
        assert!((ladder.stage(1).eval(1.0) - 3.4).abs() < 1e-12);
        assert!(ladder.stage(2).values().iter().zip(ladder.stage(2).grid().nodes()).all(|(v, z)| *v == g(*z, &p)));
    }

    #[test]
    fn horizon_one_is_payoff() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(4.0, 1.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let ladder = backward_induction(&KernelSequence::stationary(k.clone()), &p, 1, grid).unwrap();
        let want = 1.0 + 0.7 * g(3.0 / 7.0, &p) + 0.3 * g(7.0 / 3.0, &p);
        assert!((ladder.lower_bound() - want).abs() < 1e-12);
        assert!(matches!(
            backward_induction(&KernelSequence::stationary(k), &p, 0, ladder.stage(1).grid().clone()),
            Err(Error::InvalidHorizon(0))
        ));
    }

    #[test]
    fn expensive_sampling_gives_payoff() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let sol = solve_stationary(&k, 6.0, 5.0, &GridSpec::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        let p = sol.params();
        for (z, v) in sol.rho.grid().nodes().iter().zip(sol.rho.values()) {
            assert_eq!(*v, g(*z, p));
        }
    }

    #[test]
    fn fixed_point_budget_exhaustion() {
        let k = kernel(&[0.7, 0.3], &[0.3, 0.7]);
        let p = DesignParams::new(5.0, 1.0).unwrap();
        let grid = Arc::new(Grid::for_kernels(&GridSpec::default(), &p, [&k]).unwrap());
        let r = rho_fixed_point(&k, 0.02, &p, grid, &FixedPointOptions { tol: 1e-10, max_iter: 3 });
        assert!(matches!(r, Err(Error::NoConvergence { iterations: 3, .. })));
    }

    #[test]
    fn non_lattice_grid_interpolates() {
        let k = kernel(&[0.5, 0.3, 0.2], &[0.21, 0.33, 0.46]);
        let sol = solve_stationary(&k, 0.05, 3.0, &GridSpec::default()).unwrap();
        assert!(sol.rho.grid().lattice().is_none());
        assert!(sol.rho.bound_violation() < 1e-12);
        assert!(concavity_defect(sol.rho.grid().nodes(), sol.rho.values()) <= 1e-9);
        assert!(sol.monotonicity_violation <= 1e-12);
    }
}
