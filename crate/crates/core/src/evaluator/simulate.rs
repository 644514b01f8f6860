use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostModel, GroupSizeModel, ObservationModel};
use crate::test_rules::{evaluate_rule_at, z_from_log, Decision, TestRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub reps: usize,
    pub seed: u64,
    /// Replications still running after this many groups are censored.
    pub cap: usize,
}

/// Monte Carlo estimates under one hypothesis.
///
/// Censored replications count with the cost paid up to the cap and with
/// `tau = cap`, so the cost and `tau` means are then lower bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub hypothesis: Hypothesis,
    pub reps: usize,
    pub seed: u64,
    pub cap: usize,
    /// Fraction of replications that rejected H0.
    pub reject_rate: f64,
    /// Fraction that accepted H0.
    pub accept_rate: f64,
    pub mean_cost: f64,
    pub mean_tau: f64,
    /// Standard errors; `None` when `reps = 1`.
    pub reject_rate_se: Option<f64>,
    pub accept_rate_se: Option<f64>,
    pub mean_cost_se: Option<f64>,
    pub mean_tau_se: Option<f64>,
    pub cap_hits: usize,
    /// Empirical `P(tau >= k)` for `k = 1..=max tau`.
    pub tail: Vec<f64>,
}

struct Outcome {
    tau: usize,
    cost: f64,
    decision: Option<Decision>,
}

/// Sampler for one hypothesis, shared read-only by all replications.
struct Sampler {
    obs: WeightedIndex<f64>,
    log_lr: Vec<f64>,
    sizes: Vec<usize>,
    costs: Vec<f64>,
    /// Group-size samplers for stages `1..=prefix`, then the tail.
    groups: Vec<WeightedIndex<f64>>,
}

fn weighted(p: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(p).map_err(|e| Error::NotAPmf(e.to_string()))
}

impl Sampler {
    fn new(model: &ObservationModel, groups: &GroupSizeModel, cost: &CostModel, h: Hypothesis) -> Result<Self> {
        let f = match h {
            Hypothesis::H0 => model.f0(),
            Hypothesis::H1 => model.f1(),
        };
        let log_lr = (0..model.alphabet_size())
            .map(|x| model.symbol_log_lr(x).unwrap_or(0.0))
            .collect();
        let stage_samplers = (1..=groups.prefix_len() + 1)
            .map(|k| weighted(groups.pmf_at(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obs: weighted(f)?,
            log_lr,
            sizes: groups.support().to_vec(),
            costs: cost.costs(groups.support())?,
            groups: stage_samplers,
        })
    }

    fn run(&self, rule: &TestRule, rng: &mut ChaCha8Rng, cap: usize) -> Outcome {
        let mut log_z = 0.0;
        let mut cost = 0.0;
        for k in 1..=cap {
            let g = &self.groups[(k - 1).min(self.groups.len() - 1)];
            let idx = g.sample(rng);
            cost += self.costs[idx];
            for _ in 0..self.sizes[idx] {
                log_z += self.log_lr[self.obs.sample(rng)];
            }
            let z = z_from_log(log_z);
            let v = evaluate_rule_at(rule, k, z);
            let stop = match v.stop_probability {
                p if p >= 1.0 => true,
                p if p <= 0.0 => false,
                p => rng.gen::<f64>() < p,
            };
            if stop {
                return Outcome { tau: k, cost, decision: Some(v.decision) };
            }
        }
        Outcome { tau: cap, cost, decision: None }
    }
}

fn mean_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, Option<f64>) {
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}

/// Monte Carlo run of `rule` under hypothesis `h`.
///
/// Replication `i` draws from a ChaCha8 generator seeded with `seed` on
/// stream `i`, so results do not depend on thread scheduling; outcomes are
/// reduced sequentially in replication order.
pub fn simulate(
    rule: &TestRule,
    model: &ObservationModel,
    groups: &GroupSizeModel,
    cost: &CostModel,
    h: Hypothesis,
    opts: &SimulationOptions,
) -> Result<SimulationRun> {
    if opts.reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    if opts.cap == 0 {
        return Err(Error::InvalidHorizon(0));
    }
    let sampler = Sampler::new(model, groups, cost, h)?;
    let outcomes: Vec<Outcome> = (0..opts.reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i);
            sampler.run(rule, &mut rng, opts.cap)
        })
        .collect();

    let n = outcomes.len();
    let indicator = |d: Decision| outcomes.iter().map(move |o| if o.decision == Some(d) { 1.0 } else { 0.0 });
    let (reject_rate, reject_rate_se) = mean_se(indicator(Decision::Reject), n);
    let (accept_rate, accept_rate_se) = mean_se(indicator(Decision::Accept), n);
    let (mean_cost, mean_cost_se) = mean_se(outcomes.iter().map(|o| o.cost), n);
    let (mean_tau, mean_tau_se) = mean_se(outcomes.iter().map(|o| o.tau as f64), n);
    let max_tau = outcomes.iter().map(|o| o.tau).max().unwrap_or(0);
    let mut counts = vec![0usize; max_tau + 1];
    for o in &outcomes {
        counts[o.tau] += 1;
    }
    let mut tail = Vec::with_capacity(max_tau);
    let mut at_least = n;
    for k in 1..=max_tau {
        tail.push(at_least as f64 / n as f64);
        at_least -= counts[k];
    }
    Ok(SimulationRun {
        hypothesis: h,
        reps: n,
        seed: opts.seed,
        cap: opts.cap,
        reject_rate,
        accept_rate,
        mean_cost,
        mean_tau,
        reject_rate_se,
        accept_rate_se,
        mean_cost_se,
        mean_tau_se,
        cap_hits: outcomes.iter().filter(|o| o.decision.is_none()).count(),
        tail,
    })
}
