//! Stopping thresholds of the stationary problem and the inverse design.
//!
//! For a converged `rho_bar` the optimal rule continues exactly where
//! `g(z) > c + rho_bar(z)`. Below `d = lambda0 / lambda1` this reads
//! `D1(z) = lambda1 z - rho_bar(z) > c`, above it `D2(z) = lambda0 - rho_bar(z) > c`;
//! `D1` is increasing and `D2` decreasing on the relevant ranges, so the
//! continuation set is an interval `(A, B)` found by bisection.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageKernel;
use crate::value_iteration::{
    g, rho_fixed_point, DesignParams, FixedPointOptions, Grid, GridSpec, RhoSolution, MAX_GRID_SPAN,
};

/// Relative width at which log-space bisection stops.
pub const ROOT_REL_TOL: f64 = 1e-13;
/// Relative slack used when deciding that `lambda0 <= c + rho_bar(d)`.
pub const TRIVIAL_REL_TOL: f64 = 1e-12;

/// Continuation thresholds of the stationary rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(rename = "A")]
    pub a: f64,
    /// `+inf` when no upper threshold exists; serialized as `null`.
    #[serde(rename = "B", with = "extended")]
    pub b: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub c: f64,
    /// `|g - c - rho_bar|` at `A` and at `B` (zero when `B` is infinite).
    pub residual_a: f64,
    pub residual_b: f64,
    pub upper_threshold_exists: bool,
    pub warnings: Vec<String>,
}

/// Serde adapter writing `+inf` as `null`.
pub mod extended {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Bisection in `log z` for the switch point of `pred` between `lo` and `hi`,
/// where `pred(lo) != pred(hi)`. Returns the bracket `(lo', hi')`.
pub(crate) fn bisect_log(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> (f64, f64) {
    let at_lo = pred(lo);
    for _ in 0..400 {
        if hi / lo - 1.0 < ROOT_REL_TOL {
            break;
        }
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// `g(z) - c - rho_bar(z)`: positive where continuing is strictly better.
pub fn stopping_gap(sol: &RhoSolution, z: f64) -> f64 {
    g(z, sol.params()) - sol.c - sol.rho_bar.eval(z)
}

/// `lim_{z -> inf}` of [`stopping_gap`].
pub fn gap_at_infinity(sol: &RhoSolution) -> f64 {
    sol.params().lambda0 - sol.c - sol.rho_bar.limit_at_infinity()
}

/// True when stopping after the first group is optimal: `lambda0 <= c + rho_bar(d)`.
pub fn is_trivial(sol: &RhoSolution) -> bool {
    let p = sol.params();
    let d = p.decision_threshold();
    p.lambda0 <= sol.c + sol.rho_bar.eval(d) + TRIVIAL_REL_TOL * p.lambda0
}

/// Solves `g = c + rho_bar` on both sides of `d = lambda0 / lambda1`.
pub fn solve_thresholds(sol: &RhoSolution) -> Result<Thresholds> {
    if is_trivial(sol) {
        return Err(Error::TrivialDesign);
    }
    let p = *sol.params();
    let d = p.decision_threshold();
    let grid = sol.rho.grid();
    let cont = |z: f64| stopping_gap(sol, z) > 0.0;

    let lo = grid.min_z();
    if cont(lo) {
        return Err(Error::GridTooNarrow(format!("lower threshold below grid minimum {lo:e}")));
    }
    let (a_lo, a_hi) = bisect_log(lo, d, cont);
    let a = if stopping_gap(sol, a_hi).abs() < stopping_gap(sol, a_lo).abs() { a_hi } else { a_lo };

    let hi = grid.max_z();
    let mut warnings = Vec::new();
    let (b, upper_exists) = if cont(hi) {
        if gap_at_infinity(sol) > 0.0 {
            warnings.push(
                "no upper threshold: the rule never rejects before z reaches +inf, and \
                 expected-cost optimality under H1 does not apply"
                    .to_string(),
            );
            (f64::INFINITY, false)
        } else {
            return Err(Error::GridTooNarrow(format!("upper threshold above grid maximum {hi:e}")));
        }
    } else {
        let (b_lo, b_hi) = bisect_log(d, hi, cont);
        let b = if stopping_gap(sol, b_hi).abs() < stopping_gap(sol, b_lo).abs() { b_hi } else { b_lo };
        (b, true)
    };

    if !(a <= 1.0 && 1.0 <= b) {
        warnings.push(format!("1 is outside [A, B] = [{a}, {b}]: the first group alone decides"));
    }
    let residual_a = stopping_gap(sol, a).abs();
    let residual_b = if upper_exists { stopping_gap(sol, b).abs() } else { 0.0 };
    Ok(Thresholds {
        a,
        b,
        lambda0: p.lambda0,
        lambda1: p.lambda1,
        c: sol.c,
        residual_a,
        residual_b,
        upper_threshold_exists: upper_exists,
        warnings,
    })
}

/// Upper bound on the grid span reached by repeated widening.
pub const MAX_SPAN: f64 = MAX_GRID_SPAN;

/// Stationary solution and thresholds, widening the grid while a threshold
/// falls outside it. Small sampling costs push `B` far above `d` because the
/// cost accrues under H0 only, where `z` drifts down.
pub fn stationary_design(
    kernel: &StageKernel,
    params: &DesignParams,
    spec: &GridSpec,
    opts: &FixedPointOptions,
) -> Result<(RhoSolution, Result<Thresholds>)> {
    let mut spec = *spec;
    loop {
        let grid = Arc::new(Grid::for_kernels(&spec, params, [kernel])?);
        let sol = rho_fixed_point(kernel, kernel.mean_cost(), params, grid, opts)?;
        match solve_thresholds(&sol) {
            Err(Error::GridTooNarrow(_)) if spec.span < MAX_SPAN => spec = spec.widened(),
            th => return Ok((sol, th)),
        }
    }
}

/// Result of the sign-pattern audit around solved thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignPattern {
    pub below_a: f64,
    pub inside: Option<f64>,
    pub above_b: Option<f64>,
    pub holds: bool,
}

/// Checks `g < c + rho_bar` at `A/2` and `2B` and `g > c + rho_bar` at `sqrt(AB)`.
pub fn check_sign_pattern(sol: &RhoSolution, th: &Thresholds) -> SignPattern {
    let below_a = stopping_gap(sol, th.a / 2.0);
    let above_b = th.b.is_finite().then(|| stopping_gap(sol, 2.0 * th.b));
    let mid = if th.b.is_finite() { (th.a * th.b).sqrt() } else { 2.0 * th.a.max(th.lambda0 / th.lambda1) };
    let inside = (th.a < mid && mid < th.b).then(|| stopping_gap(sol, mid));
    let holds = below_a < 0.0 && above_b.is_none_or(|v| v < 0.0) && inside.is_none_or(|v| v > 0.0);
    SignPattern { below_a, inside, above_b, holds }
}

/// Memoized stationary solutions keyed on `(c, lambda)` at 12 significant digits.
#[derive(Debug)]
pub struct RhoCache {
    kernel: StageKernel,
    spec: GridSpec,
    opts: FixedPointOptions,
    table: Mutex<HashMap<(String, String), Arc<RhoSolution>>>,
}

impl RhoCache {
    pub fn new(kernel: StageKernel, spec: GridSpec, opts: FixedPointOptions) -> Self {
        Self { kernel, spec, opts, table: Mutex::new(HashMap::new()) }
    }

    pub fn kernel(&self) -> &StageKernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.table.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stationary solution with `lambda1 = 1`.
    pub fn solve(&self, c: f64, lambda: f64) -> Result<Arc<RhoSolution>> {
        let key = (format!("{c:.11e}"), format!("{lambda:.11e}"));
        if let Some(hit) = self.table.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let params = DesignParams::normalized(lambda)?;
        let grid = Arc::new(Grid::for_kernels(&self.spec, &params, [&self.kernel])?);
        let sol = Arc::new(rho_fixed_point(&self.kernel, c, &params, grid, &self.opts)?);
        self.table.lock().unwrap().insert(key, sol.clone());
        Ok(sol)
    }
}

/// `R(z; c, lambda) = c + rho_bar(z; c, lambda)`, extended by `R = c` when
/// `z`, `c` or `lambda` is zero.
pub fn r_function(z: f64, c: f64, lambda: f64, cache: &RhoCache) -> Result<f64> {
    if !(z >= 0.0 && c >= 0.0 && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("R needs z, c, lambda >= 0 (got {z}, {c}, {lambda})")));
    }
    if z == 0.0 || c == 0.0 || lambda == 0.0 {
        return Ok(c);
    }
    Ok(c + cache.solve(c, lambda)?.rho_bar.eval(z))
}

/// Multiplier and cost scale that reproduce prescribed thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseDesign {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub lambda: f64,
    pub c: f64,
    /// `|c + rho_bar(A) - A|`.
    pub residual_lower: f64,
    /// `|G(lambda)| = |lambda - c - rho_bar(B)|`.
    pub residual_upper: f64,
    /// Final bracket of the outer bisection on `lambda`.
    pub lambda_bracket: (f64, f64),
}

/// `c(lambda)`: the cost with `c + rho_bar(A; c, lambda) = A`.
fn cost_for_lambda(a: f64, lambda: f64, cache: &RhoCache) -> Result<f64> {
    let excess = |c: f64| -> Result<f64> { Ok(c + cache.solve(c, lambda)?.rho_bar.eval(a) - a) };
    // excess(A) >= 0 and excess -> -A as c -> 0
    let mut hi = a;
    let mut lo = a;
    let mut found = false;
    for _ in 0..60 {
        lo /= 2.0;
        if excess(lo)? < 0.0 {
            found = true;
            break;
        }
        hi = lo;
    }
    if !found {
        return Err(Error::NoRoot(format!("no sign change of c + rho_bar(A) - A for lambda={lambda}")));
    }
    for _ in 0..200 {
        if hi / lo - 1.0 < ROOT_REL_TOL {
            break;
        }
        let mid = (lo * hi).sqrt();
        if excess(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if excess(hi)?.abs() < excess(lo)?.abs() { hi } else { lo })
}

/// `G(lambda) = lambda - c(lambda) - rho_bar(B; c(lambda), lambda)` with `c(lambda)`.
fn outer_residual(a: f64, b: f64, lambda: f64, cache: &RhoCache) -> Result<(f64, f64)> {
    let c = cost_for_lambda(a, lambda, cache)?;
    let sol = cache.solve(c, lambda)?;
    Ok((lambda - c - sol.rho_bar.eval(b), c))
}

/// Finds `(lambda, c)` whose stationary rule has thresholds `(A, B)`, with
/// `lambda1 = 1`. Bisection on `lambda` in `[A, B]` over `G`, each probe
/// solving for `c(lambda)` by an inner bisection.
pub fn design_from_thresholds(a: f64, b: f64, cache: &RhoCache) -> Result<InverseDesign> {
    if !(a > 0.0 && a < b && b.is_finite()) {
        return Err(Error::BadThresholds { lower: a, upper: b });
    }
    let (g_lo, _) = outer_residual(a, b, a, cache)?;
    let (g_hi, _) = outer_residual(a, b, b, cache)?;
    if !(g_lo <= 0.0 && g_hi > 0.0) {
        return Err(Error::NoRoot(format!(
            "G does not change sign on [A, B]: G(A)={g_lo:e}, G(B)={g_hi:e}"
        )));
    }
    let (mut lo, mut hi) = (a, b);
    for _ in 0..200 {
        if hi / lo - 1.0 < ROOT_REL_TOL {
            break;
        }
        let mid = (lo * hi).sqrt();
        if outer_residual(a, b, mid, cache)?.0 <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (g_at_lo, c_lo) = outer_residual(a, b, lo, cache)?;
    let (g_at_hi, c_hi) = outer_residual(a, b, hi, cache)?;
    let (lambda, c, g_res) = if g_at_hi.abs() < g_at_lo.abs() { (hi, c_hi, g_at_hi) } else { (lo, c_lo, g_at_lo) };
    let sol = cache.solve(c, lambda)?;
    Ok(InverseDesign {
        a,
        b,
        lambda,
        c,
        residual_lower: (c + sol.rho_bar.eval(a) - a).abs(),
        residual_upper: g_res.abs(),
        lambda_bracket: (lo, hi),
    })
}
