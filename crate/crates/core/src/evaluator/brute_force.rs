use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostModel, GroupSizeModel, ObservationModel};
use crate::test_rules::{evaluate_rule_at, z_from_log, Decision, TestRule};
use crate::value_iteration::DesignParams;
use super::OcPoint;

/// Reachable states beyond this are refused.
const MAX_STATES: usize = 10_000;
/// Deterministic stopping rules beyond `2^MAX_RULE_BITS` are refused.
const MAX_RULE_BITS: usize = 24;
/// Observation sequences enumerated per group size.
const MAX_SEQUENCES: usize = 1_000_000;
/// Decision bits enumerated exhaustively up to this count.
const MAX_PHI_BITS: usize = 12;
/// Largest candidate list built by [`StateSpace::candidates`].
const MAX_CANDIDATES: u64 = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ZKey {
    Zero,
    Finite(i64),
    Infinite,
}

fn key_of(log_z: f64) -> ZKey {
    if log_z == f64::NEG_INFINITY {
        ZKey::Zero
    } else if log_z == f64::INFINITY {
        ZKey::Infinite
    } else {
        ZKey::Finite((log_z * 1e8).round() as i64)
    }
}

/// Reachable `(stage, z)` states of a truncated problem, with transition
/// probabilities obtained by enumerating every observation sequence.
#[derive(Debug, Clone)]
pub struct StateSpace {
    horizon: usize,
    /// `log z` of the states at stages `0..=N`; stage 0 is `z = 1`.
    levels: Vec<Vec<f64>>,
    /// `transitions[k-1][s]`: moves from state `s` of stage `k-1` into stage `k`.
    transitions: Vec<Vec<Vec<(usize, [f64; 2])>>>,
    mean_costs: Vec<f64>,
    /// Index of the first stopping bit of stages `1..N-1`.
    offsets: Vec<usize>,
}

/// Group-level moves `(log z, P0, P1)` for one stage, from raw sequences.
fn stage_moves(model: &ObservationModel, support: &[usize], pmf: &[f64]) -> Result<Vec<(f64, [f64; 2])>> {
    let m = model.alphabet_size();
    let (f0, f1) = (model.f0(), model.f1());
    let mut moves = Vec::new();
    for (&n, &p) in support.iter().zip(pmf) {
        if p == 0.0 {
            continue;
        }
        let count = (m as f64).powi(n as i32);
        if count > MAX_SEQUENCES as f64 {
            return Err(Error::StateSpaceTooLarge(format!("{m}^{n} observation sequences")));
        }
        let mut seq = vec![0usize; n];
        loop {
            let (mut q0, mut q1, mut log_z) = (p, p, 0.0);
            for &x in &seq {
                q0 *= f0[x];
                q1 *= f1[x];
                log_z += if f0[x] == 0.0 {
                    f64::INFINITY
                } else if f1[x] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (f1[x] / f0[x]).ln()
                };
            }
            if q0 > 0.0 || q1 > 0.0 {
                moves.push((log_z, [q0, q1]));
            }
            // next sequence in lexicographic order
            let mut i = 0;
            while i < n && seq[i] + 1 == m {
                seq[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
            seq[i] += 1;
        }
    }
    Ok(moves)
}

impl StateSpace {
    pub fn build(model: &ObservationModel, groups: &GroupSizeModel, cost: &CostModel, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidHorizon(0));
        }
        let costs = cost.costs(groups.support())?;
        let mut levels = vec![vec![0.0]];
        let mut transitions = Vec::new();
        let mut mean_costs = Vec::new();
        let mut total = 1;
        for k in 1..=horizon {
            let pmf = groups.pmf_at(k);
            mean_costs.push(pmf.iter().zip(&costs).map(|(p, c)| p * c).sum());
            let moves = stage_moves(model, groups.support(), pmf)?;
            let mut index: BTreeMap<ZKey, (usize, f64)> = BTreeMap::new();
            let mut raw = Vec::new();
            for &from in &levels[k - 1] {
                let mut out = Vec::new();
                for &(step, p) in &moves {
                    let to = from + step;
                    let next_id = index.len();
                    let id = index.entry(key_of(to)).or_insert((next_id, to)).0;
                    out.push((id, p));
                }
                raw.push(out);
            }
            // relabel states in increasing z
            let mut order: Vec<(usize, f64)> = index.values().copied().collect();
            order.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut relabel = vec![0; order.len()];
            for (new, (old, _)) in order.iter().enumerate() {
                relabel[*old] = new;
            }
            let level_trans = raw
                .into_iter()
                .map(|out| {
                    let mut acc: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
                    for (id, p) in out {
                        let e = acc.entry(relabel[id]).or_insert([0.0, 0.0]);
                        e[0] += p[0];
                        e[1] += p[1];
                    }
                    acc.into_iter().collect()
                })
                .collect();
            total += order.len();
            if total > MAX_STATES {
                return Err(Error::StateSpaceTooLarge(format!("more than {MAX_STATES} reachable states")));
            }
            levels.push(order.into_iter().map(|(_, z)| z).collect());
            transitions.push(level_trans);
        }
        let mut offsets = vec![0];
        for k in 1..horizon {
            offsets.push(offsets[k - 1] + levels[k].len());
        }
        Ok(Self { horizon, levels, transitions, mean_costs, offsets })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `log z` of the states at stage `k`.
    pub fn states(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    /// Number of stop/continue choices (states at stages `1..N-1`).
    pub fn stop_bits(&self) -> usize {
        self.offsets[self.horizon - 1]
    }

    fn stop_bit(&self, k: usize, i: usize) -> usize {
        self.offsets[k - 1] + i
    }

    /// Number of states at stages `1..=N`.
    pub fn decision_bits(&self) -> usize {
        self.levels[1..].iter().map(Vec::len).sum()
    }

    /// Stop/continue assignment of a deterministic rule (bit set = stop).
    pub fn assignment_of(&self, rule: &TestRule) -> u64 {
        let mut bits = 0u64;
        for k in 1..self.horizon {
            for (i, log_z) in self.levels[k].iter().enumerate() {
                let z = z_from_log(*log_z);
                if evaluate_rule_at(rule, k, z).stop_probability >= 0.5 {
                    bits |= 1 << self.stop_bit(k, i);
                }
            }
        }
        bits
    }

    /// Exact `(alpha, beta, K0, K1)` of the rule stopping per `psi` and
    /// rejecting where `reject(k, i)` holds, by forward enumeration.
    fn evaluate(&self, psi: u64, reject: impl Fn(usize, usize) -> bool) -> [f64; 4] {
        let mut alive = vec![[1.0, 1.0]];
        let (mut alpha, mut beta, mut k0, mut k1) = (0.0, 0.0, 0.0, 0.0);
        for k in 1..=self.horizon {
            let c = self.mean_costs[k - 1];
            k0 += c * alive.iter().map(|m| m[0]).sum::<f64>();
            k1 += c * alive.iter().map(|m| m[1]).sum::<f64>();
            let mut reach = vec![[0.0, 0.0]; self.levels[k].len()];
            for (s, m) in alive.iter().enumerate() {
                for &(t, p) in &self.transitions[k - 1][s] {
                    reach[t][0] += m[0] * p[0];
                    reach[t][1] += m[1] * p[1];
                }
            }
            for (i, m) in reach.iter_mut().enumerate() {
                let stop = k == self.horizon || psi >> self.stop_bit(k, i) & 1 == 1;
                if stop {
                    if reject(k, i) {
                        alpha += m[0];
                    } else {
                        beta += m[1];
                    }
                    *m = [0.0, 0.0];
                }
            }
            alive = reach;
        }
        [alpha, beta, k0, k1]
    }

    /// Lagrangian of `psi` with the likelihood-ratio decision at `lambda0/lambda1`
    /// (rejecting on ties).
    pub fn lagrangian(&self, psi: u64, params: &DesignParams) -> f64 {
        let log_d = params.decision_threshold().ln();
        let [alpha, beta, k0, _] = self.evaluate(psi, |k, i| self.levels[k][i] >= log_d - 1e-9);
        k0 + params.lambda0 * alpha + params.lambda1 * beta
    }

    /// Operating characteristics of a deterministic rule on this state space.
    pub fn rule_oc(&self, rule: &TestRule) -> CandidateOc {
        let psi = self.assignment_of(rule);
        let [alpha, beta, k0, k1] = self.evaluate(psi, |k, i| {
            let log_z = self.levels[k][i];
            let z = z_from_log(log_z);
            rule.decision_at(z) == Decision::Reject
        });
        CandidateOc { psi, phi: 0, family: PhiFamily::Threshold, alpha, beta, k0, k1 }
    }

    /// Every deterministic stopping rule combined with every decision rule of
    /// `family` (`Auto` enumerates all decisions when there are at most 12
    /// stopping states and falls back to likelihood-ratio thresholds otherwise).
    pub fn candidates(&self, family: PhiFamily) -> Result<Vec<CandidateOc>> {
        let bits = self.stop_bits();
        if bits > MAX_RULE_BITS {
            return Err(Error::StateSpaceTooLarge(format!("2^{bits} stopping rules")));
        }
        let family = match family {
            PhiFamily::Auto if self.decision_bits() <= MAX_PHI_BITS => PhiFamily::All,
            PhiFamily::Auto => PhiFamily::Threshold,
            f => f,
        };
        let mut cuts: Vec<f64> = self.levels[1..].iter().flatten().copied().collect();
        cuts.push(f64::INFINITY);
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();
        let phis: u64 = match family {
            PhiFamily::All => {
                if self.decision_bits() > MAX_RULE_BITS {
                    return Err(Error::StateSpaceTooLarge("too many decision bits".into()));
                }
                1 << self.decision_bits()
            }
            _ => cuts.len() as u64 + 1,
        };
        if phis.saturating_mul(1 << bits) > MAX_CANDIDATES {
            return Err(Error::StateSpaceTooLarge(format!("2^{bits} stopping rules times {phis} decision rules")));
        }
        let starts: Vec<usize> = std::iter::once(0)
            .chain(self.levels[1..].iter().scan(0, |acc, l| {
                *acc += l.len();
                Some(*acc)
            }))
            .collect();
        let out = (0..1u64 << bits)
            .into_par_iter()
            .flat_map_iter(|psi| {
                let cuts = &cuts;
                let starts = &starts;
                (0..phis).map(move |phi| {
                    let [alpha, beta, k0, k1] = match family {
                        PhiFamily::All => self.evaluate(psi, |k, i| phi >> (starts[k - 1] + i) & 1 == 1),
                        _ => {
                            // phi = 0 rejects everywhere, phi = j rejects from cut j-1 upward
                            let t = if phi == 0 { f64::NEG_INFINITY } else { cuts[phi as usize - 1] };
                            self.evaluate(psi, |k, i| self.levels[k][i] >= t)
                        }
                    };
                    CandidateOc { psi, phi, family, alpha, beta, k0, k1 }
                })
            })
            .collect();
        Ok(out)
    }
}

/// Decision rules enumerated alongside each stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiFamily {
    /// Every reject/accept assignment over all states.
    All,
    /// `reject iff z >= t` for `t` ranging over the reachable values.
    Threshold,
    Auto,
}

/// A candidate `(psi, phi)` with its exact operating characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateOc {
    pub psi: u64,
    pub phi: u64,
    pub family: PhiFamily,
    pub alpha: f64,
    pub beta: f64,
    pub k0: f64,
    pub k1: f64,
}

impl CandidateOc {
    pub fn point(&self) -> OcPoint {
        OcPoint { alpha: self.alpha, beta: self.beta, k0: self.k0, k1: self.k1 }
    }
}

/// Minimum Lagrangian over all deterministic truncated stopping rules.
#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub min_lagrangian: f64,
    /// Assignments within `1e-9` of the minimum.
    pub minimizers: Vec<u64>,
    pub rules_checked: u64,
    pub states: StateSpace,
}

/// Exhaustive search over every stop/continue assignment on the reachable
/// states of an `N`-stage problem; decisions follow the likelihood-ratio
/// rule, which is optimal for any fixed stopping rule.
pub fn brute_force_truncated_optimum(
    model: &ObservationModel,
    groups: &GroupSizeModel,
    cost: &CostModel,
    params: &DesignParams,
    horizon: usize,
) -> Result<BruteForceResult> {
    let states = StateSpace::build(model, groups, cost, horizon)?;
    let bits = states.stop_bits();
    if bits > MAX_RULE_BITS {
        return Err(Error::StateSpaceTooLarge(format!("2^{bits} stopping rules")));
    }
    let values: Vec<f64> = (0..1u64 << bits).into_par_iter().map(|psi| states.lagrangian(psi, params)).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let minimizers = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= min + 1e-9)
        .map(|(i, _)| i as u64)
        .collect();
    Ok(BruteForceResult { min_lagrangian: min, minimizers, rules_checked: values.len() as u64, states })
}
