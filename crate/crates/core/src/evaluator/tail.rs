use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::KernelSequence;
use crate::test_rules::TestRule;

use super::{exact_oc, ExactOptions, Hypothesis};

/// Tail probabilities below this are left out of the fit.
const FIT_FLOOR: f64 = 1e-13;

/// Least-squares fit of `log P(tau >= k) ~ log a + k log r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub r_hat: f64,
    /// Smallest `a` with `P(tau >= k) <= a r_hat^k` on every fitted `k`.
    pub a: f64,
    pub points: usize,
    /// Fewer than three positive tail values.
    pub degenerate: bool,
    /// `r_hat` not below one.
    pub non_geometric: bool,
}

/// Fits the geometric decay of a tail `P(tau >= k)`, `k = 1, 2, ...`.
pub fn tail_fit(tail: &[f64]) -> TailFit {
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > FIT_FLOOR)
        .map(|(i, p)| ((i + 1) as f64, p.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return TailFit { r_hat: 0.0, a: 1.0, points: n, degenerate: true, non_geometric: false };
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let r_hat = slope.exp();
    let log_a = pts.iter().map(|(k, y)| y - k * slope).fold(f64::NEG_INFINITY, f64::max);
    TailFit { r_hat, a: log_a.exp(), points: n, degenerate: false, non_geometric: r_hat >= 1.0 - 1e-9 }
}

/// Tail fit of a rule together with the Hellinger bound
/// `P0(tau >= k + 1) <= r^k / sqrt(A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub hypothesis: Hypothesis,
    pub fit: TailFit,
    pub tail: Vec<f64>,
    /// `sum_n p(n) h^n` of the stationary kernel.
    pub hellinger_rate: f64,
    /// Largest `P0(tau >= k + 1) - r^k / sqrt(A)` (nonpositive when the bound holds);
    /// `None` under H1 or without a lower threshold.
    pub hellinger_excess: Option<f64>,
    pub envelope_holds: bool,
}

/// Exact tail of `rule` under `h` and its geometric fit.
pub fn tail_decay_check(
    rule: &TestRule,
    kernels: &KernelSequence,
    h: Hypothesis,
    opts: &ExactOptions,
) -> Result<TailReport> {
    let oc = exact_oc(rule, kernels, opts)?;
    let tail = match h {
        Hypothesis::H0 => oc.tail.h0,
        Hypothesis::H1 => oc.tail.h1,
    };
    let fit = tail_fit(&tail);
    let r = kernels.tail().hellinger_rate();
    let hellinger_excess = match (h, rule.tail) {
        (Hypothesis::H0, Some(region)) if kernels.is_stationary() && !region.is_empty() => Some(
            tail.iter()
                .enumerate()
                .skip(1)
                .map(|(i, p)| p - r.powi(i as i32) / region.lower.sqrt())
                .fold(f64::NEG_INFINITY, f64::max),
        ),
        _ => None,
    };
    let envelope_holds = fit.degenerate
        || tail
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > FIT_FLOOR)
            .all(|(i, p)| *p <= fit.a * fit.r_hat.powi(i as i32 + 1) * (1.0 + 1e-12));
    Ok(TailReport { hypothesis: h, fit, tail, hellinger_rate: r, hellinger_excess, envelope_holds })
}
