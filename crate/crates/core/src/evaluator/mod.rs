//! Operating characteristics of a rule: exact forward propagation of the
//! likelihood-ratio atoms, Monte Carlo, exhaustive search over small truncated
//! rules, optimality audits and tail-decay fits.

mod audit;
mod brute_force;
mod simulate;
mod tail;

pub use audit::{constrained_optimality_audit, AuditReport, AuditViolation, OcPoint};
pub use brute_force::{brute_force_truncated_optimum, BruteForceResult, CandidateOc, PhiFamily, StateSpace};
pub use simulate::{simulate, Hypothesis, SimulationOptions, SimulationRun};
pub use tail::{tail_decay_check, tail_fit, TailFit, TailReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{merge_atoms, KernelSequence, WeightedAtom};
use crate::test_rules::{evaluate_rule_at, z_from_log, Decision, TestRule};
use crate::value_iteration::DesignParams;

/// Controls for [`exact_oc`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    /// Maximum number of groups.
    pub cap: usize,
    /// Propagation stops once the continuing mass is below this under both hypotheses.
    pub mass_tol: f64,
    /// States closer than this in `log z` are merged.
    pub merge_tol: f64,
    /// Largest number of continuing states allowed.
    pub state_cap: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self { cap: 10_000, mass_tol: 1e-12, merge_tol: 1e-12, state_cap: 1_000_000 }
    }
}

/// `P_i(tau >= k)` for `k = 1, 2, ...` under each hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tail {
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
}

/// Error probabilities, expected costs and stopping-time law of a rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub alpha: f64,
    pub beta: f64,
    /// Expected total cost under H0 (a lower bound when H0 mass is left at the cap).
    #[serde(rename = "K0")]
    pub k0: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "E_tau_0")]
    pub e_tau0: f64,
    #[serde(rename = "E_tau_1")]
    pub e_tau1: f64,
    pub tail: Tail,
    /// Mass still continuing after the last computed stage, per hypothesis.
    pub truncation_mass: [f64; 2],
    /// Whether the continuing mass fell below the tolerance, per hypothesis.
    pub terminated: [bool; 2],
    /// `sum_k c_k P_i(tau >= k)`, computed independently of the per-path costs.
    pub k_stagewise: [f64; 2],
    /// Largest deviation from `stopped + continuing = 1` over all stages.
    pub conservation_error: f64,
    pub stages: usize,
}

impl OperatingCharacteristics {
    pub fn point(&self) -> OcPoint {
        OcPoint { alpha: self.alpha, beta: self.beta, k0: self.k0, k1: self.k1 }
    }
}

/// `L = K0 + lambda0 alpha + lambda1 beta`.
pub fn lagrangian(oc: &OperatingCharacteristics, params: &DesignParams) -> f64 {
    oc.k0 + params.lambda0 * oc.alpha + params.lambda1 * oc.beta
}

fn mass(states: &[WeightedAtom], f: impl Fn(&WeightedAtom) -> f64) -> f64 {
    states.iter().map(f).fold(0.0, |a, b| a + b)
}

/// Exact operating characteristics by forward propagation of the continuing
/// likelihood-ratio atoms, stage by stage.
///
/// Each state carries its probability under both hypotheses and the expected
/// cost accumulated along the paths leading to it; stopping moves these into
/// the error and cost totals. Non-termination under a hypothesis is reported
/// through `terminated` and `truncation_mass`, not as an error.
pub fn exact_oc(rule: &TestRule, kernels: &KernelSequence, opts: &ExactOptions) -> Result<OperatingCharacteristics> {
    if opts.cap == 0 {
        return Err(Error::InvalidHorizon(0));
    }
    let mut states = vec![WeightedAtom { log_lr: 0.0, p0: 1.0, p1: 1.0, q0: 0.0, q1: 0.0 }];
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut stopped = [0.0f64; 2];
    let mut cost = [0.0f64; 2];
    let mut stagewise = [0.0f64; 2];
    let mut tail = Tail { h0: Vec::new(), h1: Vec::new() };
    let mut conservation_error = 0.0f64;
    let mut stages = 0;

    for k in 1..=opts.cap {
        let kernel = kernels.stage(k);
        let alive = [mass(&states, |s| s.p0), mass(&states, |s| s.p1)];
        tail.h0.push(alive[0]);
        tail.h1.push(alive[1]);
        for i in 0..2 {
            stagewise[i] += kernel.mean_cost() * alive[i];
        }

        let atoms = kernel.group_lr().atoms();
        let mut next = Vec::with_capacity(states.len() * atoms.len());
        for s in &states {
            for (a, cm) in atoms.iter().zip(kernel.cost_mass()) {
                let p0 = s.p0 * a.p0;
                let p1 = s.p1 * a.p1;
                if p0 == 0.0 && p1 == 0.0 {
                    continue;
                }
                next.push(WeightedAtom {
                    log_lr: s.log_lr + a.log_lr,
                    p0,
                    p1,
                    q0: s.q0 * a.p0 + s.p0 * cm[0],
                    q1: s.q1 * a.p1 + s.p1 * cm[1],
                });
            }
        }
        let merged = merge_atoms(next, opts.merge_tol);

        let mut survivors = Vec::with_capacity(merged.len());
        for s in merged {
            let v = evaluate_rule_at(rule, k, z_from_log(s.log_lr));
            let p = v.stop_probability;
            if p > 0.0 {
                match v.decision {
                    Decision::Reject => alpha += p * s.p0,
                    Decision::Accept => beta += p * s.p1,
                }
                stopped[0] += p * s.p0;
                stopped[1] += p * s.p1;
                cost[0] += p * s.q0;
                cost[1] += p * s.q1;
            }
            if p < 1.0 {
                let keep = 1.0 - p;
                survivors.push(WeightedAtom {
                    log_lr: s.log_lr,
                    p0: keep * s.p0,
                    p1: keep * s.p1,
                    q0: keep * s.q0,
                    q1: keep * s.q1,
                });
            }
        }
        states = survivors;
        if states.len() > opts.state_cap {
            return Err(Error::AtomExplosion { count: states.len(), cap: opts.state_cap });
        }
        stages = k;
        let alive = [mass(&states, |s| s.p0), mass(&states, |s| s.p1)];
        for i in 0..2 {
            conservation_error = conservation_error.max((stopped[i] + alive[i] - 1.0).abs());
        }
        if alive[0] < opts.mass_tol && alive[1] < opts.mass_tol {
            break;
        }
    }

    let alive = [mass(&states, |s| s.p0), mass(&states, |s| s.p1)];
    // paths still running contribute the cost paid so far
    let running = [mass(&states, |s| s.q0), mass(&states, |s| s.q1)];
    Ok(OperatingCharacteristics {
        alpha,
        beta,
        k0: cost[0] + running[0],
        k1: cost[1] + running[1],
        e_tau0: tail.h0.iter().sum(),
        e_tau1: tail.h1.iter().sum(),
        tail,
        truncation_mass: alive,
        terminated: [alive[0] < opts.mass_tol, alive[1] < opts.mass_tol],
        k_stagewise: stagewise,
        conservation_error,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, make_stage_kernel, CostModel};
    use crate::test_rules::{rsprt, DecisionTie};

    fn bernoulli() -> KernelSequence {
        let m = make_model(&[0.7, 0.3], &[0.3, 0.7]).unwrap();
        KernelSequence::stationary(
            make_stage_kernel(&m, &[1], &[1.0], &CostModel::Linear { a: 0.0, b: 1.0 }, 1e-12, 1000).unwrap(),
        )
    }

    #[test]
    fn wide_open_band_stops_at_first_group() {
        let rule = rsprt(0.5, 2.0, 1.0, 1.0, DecisionTie::Reject).unwrap();
        let oc = exact_oc(&rule, &bernoulli(), &ExactOptions::default()).unwrap();
        assert!((oc.alpha - 0.3).abs() < 1e-15 && (oc.beta - 0.3).abs() < 1e-15);
        assert!((oc.k0 - 1.0).abs() < 1e-15 && (oc.k1 - 1.0).abs() < 1e-15);
        assert_eq!(oc.e_tau0, 1.0);
        assert_eq!(oc.stages, 1);
        let p = DesignParams::new(4.0, 4.0).unwrap();
        assert!((lagrangian(&oc, &p) - 3.4).abs() < 1e-12);
    }

    #[test]
    fn wald_band_terminates_and_conserves_mass() {
        let rule = rsprt(1.0 / 9.0, 9.0, 1.0, 1.0, DecisionTie::Reject).unwrap();
        let oc = exact_oc(&rule, &bernoulli(), &ExactOptions::default()).unwrap();
        assert!(oc.terminated[0] && oc.terminated[1]);
        assert!(oc.conservation_error < 1e-12);
        assert!((oc.k0 - oc.k_stagewise[0]).abs() < 1e-10 && (oc.k1 - oc.k_stagewise[1]).abs() < 1e-10);
        assert!(oc.tail.h0.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        // log z is a +-1 walk in units of ln(7/3); the band is crossed at +-3 steps
        let ruin = |p: f64| {
            // P(reach +3 before -3) for a +-1 walk with up-probability p, started at 0
            let r = (1.0 - p) / p;
            (1.0 - r.powi(3)) / (1.0 - r.powi(6))
        };
        assert!((oc.alpha - ruin(0.3)).abs() < 1e-10, "{} vs {}", oc.alpha, ruin(0.3));
        assert!((oc.beta - (1.0 - ruin(0.7))).abs() < 1e-10);
    }

    #[test]
    fn cap_reports_truncation() {
        let rule = rsprt(1e-6, 1e6, 1.0, 1.0, DecisionTie::Reject).unwrap();
        let oc = exact_oc(&rule, &bernoulli(), &ExactOptions { cap: 3, ..Default::default() }).unwrap();
        assert_eq!(oc.stages, 3);
        assert!((oc.truncation_mass[0] - 1.0).abs() < 1e-15);
        assert!(!oc.terminated[0]);
        assert!((oc.k0 - 3.0).abs() < 1e-12);
        assert!(exact_oc(&rule, &bernoulli(), &ExactOptions { cap: 0, ..Default::default() }).is_err());
    }
}
