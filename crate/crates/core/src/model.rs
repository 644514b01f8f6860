//! Statistical model: a pair of simple hypotheses on a finite alphabet,
//! random group sizes with a known law, and per-group observation costs.
//!
//! Everything downstream works with the law of the likelihood ratio
//! `z = f1/f0` of a whole group, so this module reduces the model to finite
//! sets of log-likelihood-ratio atoms. Atoms at `log z = +inf` (f0 = 0 < f1)
//! and `log z = -inf` (f1 = 0 < f0) are carried as IEEE infinities and never
//! approximated by large finite numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const PMF_TOL: f64 = 1e-12;
/// Default tolerance (in log-likelihood ratio) below which atoms are merged.
pub const DEFAULT_MERGE_TOL: f64 = 1e-12;
/// Default hard cap on the number of atoms in one distribution.
pub const DEFAULT_ATOM_CAP: usize = 1_000_000;

/// Raw product pairs allowed in a single convolution before giving up.
const MAX_RAW_PRODUCTS: usize = 50_000_000;

fn check_pmf(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::NotAPmf(format!("{name} is empty")));
    }
    if let Some(bad) = v.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::NotAPmf(format!("{name} has entry {bad}")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > PMF_TOL {
        return Err(Error::NotAPmf(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// The hypothesis pair `H0: f0` against `H1: f1` on a finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    f0: Vec<f64>,
    f1: Vec<f64>,
}

impl ObservationModel {
    pub fn new(f0: Vec<f64>, f1: Vec<f64>) -> Result<Self> {
        if f0.len() < 2 || f0.len() != f1.len() {
            return Err(Error::NotAPmf(format!(
                "f0 and f1 must have equal length >= 2 (got {} and {})",
                f0.len(),
                f1.len()
            )));
        }
        check_pmf("f0", &f0)?;
        check_pmf("f1", &f1)?;
        let distinct = f0.iter().zip(&f1).any(|(a, b)| (a - b).abs() > PMF_TOL);
        if !distinct {
            return Err(Error::IndistinguishableHypotheses);
        }
        Ok(Self { f0, f1 })
    }

    pub fn alphabet_size(&self) -> usize {
        self.f0.len()
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn f1(&self) -> &[f64] {
        &self.f1
    }

    /// Log-likelihood ratio of one symbol, `ln f1(x) - ln f0(x)`.
    ///
    /// Returns `None` for symbols with zero mass under both hypotheses.
    pub fn symbol_log_lr(&self, x: usize) -> Option<f64> {
        let (p0, p1) = (self.f0[x], self.f1[x]);
        match (p0 > 0.0, p1 > 0.0) {
            (false, false) => None,
            (true, false) => Some(f64::NEG_INFINITY),
            (false, true) => Some(f64::INFINITY),
            (true, true) => Some(p1.ln() - p0.ln()),
        }
    }

    /// Hellinger affinity `h = sum_x sqrt(f0(x) f1(x))`; strictly below one
    /// for distinct hypotheses.
    pub fn hellinger_affinity(&self) -> f64 {
        self.f0.iter().zip(&self.f1).map(|(a, b)| (a * b).sqrt()).sum()
    }

    /// Law of the likelihood ratio of a single observation.
    pub fn single_obs_lr(&self) -> LrDistribution {
        let raw = (0..self.alphabet_size())
            .filter_map(|x| {
                self.symbol_log_lr(x).map(|log_lr| WeightedAtom {
                    log_lr,
                    p0: self.f0[x],
                    p1: self.f1[x],
                    q0: 0.0,
                    q1: 0.0,
                })
            })
            .collect();
        LrDistribution::from_weighted(merge_atoms(raw, DEFAULT_MERGE_TOL))
    }

    /// Law of the likelihood ratio of a group of `n` observations.
    ///
    /// Small cases are enumerated exactly over symbol-count compositions so
    /// equal products land on bit-identical log values; otherwise the n-fold
    /// convolution is built by repeated squaring with merging at each step.
    pub fn group_lr(&self, n: usize, merge_tol: f64, cap: usize) -> Result<LrDistribution> {
        if !(merge_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("merge_tol = {merge_tol}")));
        }
        let single = self.single_obs_lr();
        if n == 0 {
            return Ok(LrDistribution::point_mass());
        }
        let m = single.atoms.len();
        let count = composition_count(n, m);
        if count <= cap as f64 {
            let raw = enumerate_compositions(&single.atoms, n);
            let merged = merge_atoms(raw, merge_tol);
            if merged.len() > cap {
                return Err(Error::AtomExplosion { count: merged.len(), cap });
            }
            return Ok(LrDistribution::from_weighted(merged));
        }
        let mut result = LrDistribution::point_mass();
        let mut base = single;
        let mut k = n;
        while k > 0 {
            if k & 1 == 1 {
                result = result.convolve(&base, merge_tol, cap)?;
            }
            k >>= 1;
            if k > 0 {
                base = base.convolve(&base, merge_tol, cap)?;
            }
        }
        Ok(result)
    }
}

/// Validated constructor for an [`ObservationModel`].
pub fn make_model(f0: &[f64], f1: &[f64]) -> Result<ObservationModel> {
    ObservationModel::new(f0.to_vec(), f1.to_vec())
}

fn composition_count(n: usize, m: usize) -> f64 {
    // C(n + m - 1, m - 1)
    let k = m.saturating_sub(1);
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n + k - i) as f64 / (i + 1) as f64;
    }
    c
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn enumerate_compositions(atoms: &[LrAtom], n: usize) -> Vec<WeightedAtom> {
    let m = atoms.len();
    let mut out = Vec::new();
    let mut counts = vec![0usize; m];
    let ln_n_fact = ln_factorial(n);
    fn rec(
        idx: usize,
        remaining: usize,
        counts: &mut [usize],
        atoms: &[LrAtom],
        n: usize,
        ln_n_fact: f64,
        out: &mut Vec<WeightedAtom>,
    ) {
        let m = atoms.len();
        if idx == m - 1 {
            counts[idx] = remaining;
            out.push(composition_atom(counts, atoms, n, ln_n_fact));
            return;
        }
        for k in 0..=remaining {
            counts[idx] = k;
            rec(idx + 1, remaining - k, counts, atoms, n, ln_n_fact, out);
        }
    }
    rec(0, n, &mut counts, atoms, n, ln_n_fact, &mut out);
    out
}

fn composition_atom(counts: &[usize], atoms: &[LrAtom], n: usize, ln_n_fact: f64) -> WeightedAtom {
    let mut log_lr = 0.0;
    let (mut p0, mut p1) = (1.0f64, 1.0f64);
    let mut remaining = n;
    for (k, atom) in counts.iter().zip(atoms) {
        if *k == 0 {
            continue;
        }
        log_lr += *k as f64 * atom.log_lr;
        p0 *= atom.p0.powi(*k as i32);
        p1 *= atom.p1.powi(*k as i32);
        remaining -= k;
    }
    debug_assert_eq!(remaining, 0);
    let coef = if n <= 170 {
        multinomial(counts, n)
    } else {
        (ln_n_fact - counts.iter().map(|k| ln_factorial(*k)).sum::<f64>()).exp()
    };
    if p0 == 0.0 && p1 == 0.0 {
        // -inf and +inf together: unreachable under either hypothesis.
        log_lr = 0.0;
    }
    WeightedAtom { log_lr, p0: coef * p0, p1: coef * p1, q0: 0.0, q1: 0.0 }
}

fn multinomial(counts: &[usize], n: usize) -> f64 {
    let mut coef = 1.0f64;
    let mut left = n;
    for k in counts {
        // C(left, k)
        let mut b = 1.0f64;
        for i in 0..*k {
            b = b * (left - i) as f64 / (i + 1) as f64;
        }
        coef *= b.round();
        left -= k;
    }
    coef
}

/// One likelihood-ratio atom with its probabilities under both hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrAtom {
    pub log_lr: f64,
    pub p0: f64,
    pub p1: f64,
}

impl LrAtom {
    pub fn z(&self) -> f64 {
        self.log_lr.exp()
    }
}

/// Atom with optional cost-weighted masses `q_i = E_i[c(nu) 1{atom}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct WeightedAtom {
    pub log_lr: f64,
    pub p0: f64,
    pub p1: f64,
    pub q0: f64,
    pub q1: f64,
}

/// Sorts atoms by log-likelihood ratio and merges neighbours within `tol`.
///
/// A merged finite atom sits at the p0-weighted mean of its members. Infinite
/// atoms merge only with equal infinities; zero-mass atoms are dropped.
pub(crate) fn merge_atoms(mut atoms: Vec<WeightedAtom>, tol: f64) -> Vec<WeightedAtom> {
    atoms.retain(|a| a.p0 > 0.0 || a.p1 > 0.0);
    atoms.sort_by(|a, b| a.log_lr.total_cmp(&b.log_lr));
    let mut out: Vec<WeightedAtom> = Vec::with_capacity(atoms.len());
    let mut anchor = f64::NAN;
    let mut weighted_sum = 0.0;
    for a in atoms {
        let joins = match out.last() {
            None => false,
            Some(_) if a.log_lr.is_finite() && anchor.is_finite() => a.log_lr - anchor <= tol,
            Some(_) => a.log_lr == anchor,
        };
        if joins {
            let last = out.last_mut().unwrap();
            last.p0 += a.p0;
            last.p1 += a.p1;
            last.q0 += a.q0;
            last.q1 += a.q1;
            if a.log_lr.is_finite() {
                weighted_sum += a.p0 * a.log_lr;
                last.log_lr = weighted_sum / last.p0;
            }
        } else {
            anchor = a.log_lr;
            weighted_sum = a.p0 * a.log_lr;
            out.push(a);
        }
    }
    out
}

/// Finite law of a (group) likelihood ratio under both hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct LrDistribution {
    atoms: Vec<LrAtom>,
}

impl LrDistribution {
    /// Point mass at `z = 1` (an empty group).
    pub fn point_mass() -> Self {
        Self { atoms: vec![LrAtom { log_lr: 0.0, p0: 1.0, p1: 1.0 }] }
    }

    /// Builds a distribution from arbitrary atoms, merging within `merge_tol`.
    pub fn from_atoms(atoms: &[LrAtom], merge_tol: f64) -> Self {
        let raw = atoms
            .iter()
            .map(|a| WeightedAtom { log_lr: a.log_lr, p0: a.p0, p1: a.p1, q0: 0.0, q1: 0.0 })
            .collect();
        Self::from_weighted(merge_atoms(raw, merge_tol))
    }

    pub(crate) fn from_weighted(atoms: Vec<WeightedAtom>) -> Self {
        Self {
            atoms: atoms
                .into_iter()
                .map(|a| LrAtom { log_lr: a.log_lr, p0: a.p0, p1: a.p1 })
                .collect(),
        }
    }

    pub fn atoms(&self) -> &[LrAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// True when the event `f0 = 0 < f1` has positive probability.
    pub fn has_infinite_atom(&self) -> bool {
        self.atoms.iter().any(|a| a.log_lr == f64::INFINITY)
    }

    /// `P0(z = 0)`: mass on the event `f1 = 0 < f0`.
    pub fn null_mass_h0(&self) -> f64 {
        self.atoms.iter().filter(|a| a.log_lr == f64::NEG_INFINITY).map(|a| a.p0).sum()
    }

    /// `E0[z]`, which equals `P1(f0 > 0)`.
    pub fn mean_z_h0(&self) -> f64 {
        self.atoms.iter().filter(|a| a.log_lr.is_finite()).map(|a| a.p1).sum()
    }

    /// `E0[z^(1/2)]`.
    pub fn hellinger(&self) -> f64 {
        self.atoms.iter().map(|a| (a.p0 * a.p1).sqrt()).sum()
    }

    /// Checks mass and Radon-Nikodym consistency; returns the worst deviation.
    pub fn consistency_error(&self) -> f64 {
        let s0: f64 = self.atoms.iter().map(|a| a.p0).sum();
        let s1: f64 = self.atoms.iter().map(|a| a.p1).sum();
        let mut worst = (s0 - 1.0).abs().max((s1 - 1.0).abs());
        for a in &self.atoms {
            let dev = if a.log_lr == f64::INFINITY {
                a.p0
            } else if a.log_lr == f64::NEG_INFINITY {
                a.p1
            } else {
                (a.p1 - a.p0 * a.log_lr.exp()).abs() / a.p1.max(f64::MIN_POSITIVE)
            };
            worst = worst.max(dev);
        }
        worst
    }

    /// Distribution of the product of independent ratios.
    pub fn convolve(&self, other: &Self, merge_tol: f64, cap: usize) -> Result<Self> {
        let raw_count = self.atoms.len() * other.atoms.len();
        if raw_count > MAX_RAW_PRODUCTS {
            return Err(Error::AtomExplosion { count: raw_count, cap });
        }
        let mut raw = Vec::with_capacity(raw_count);
        for a in &self.atoms {
            for b in &other.atoms {
                let p0 = a.p0 * b.p0;
                let p1 = a.p1 * b.p1;
                if p0 == 0.0 && p1 == 0.0 {
                    continue;
                }
                raw.push(WeightedAtom { log_lr: a.log_lr + b.log_lr, p0, p1, q0: 0.0, q1: 0.0 });
            }
        }
        let merged = merge_atoms(raw, merge_tol);
        if merged.len() > cap {
            return Err(Error::AtomExplosion { count: merged.len(), cap });
        }
        Ok(Self::from_weighted(merged))
    }
}

/// Per-group observation cost `c(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CostModel {
    Constant { a: f64 },
    Linear { a: f64, b: f64 },
    /// One value per element of the group-size support, in support order.
    Table { values: Vec<f64> },
}

impl CostModel {
    /// Costs aligned with `support`.
    pub fn costs(&self, support: &[usize]) -> Result<Vec<f64>> {
        match self {
            CostModel::Constant { a } => Ok(vec![*a; support.len()]),
            CostModel::Linear { a, b } => {
                if *a < 0.0 || *b < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "linear cost needs a, b >= 0 (got a={a}, b={b})"
                    )));
                }
                Ok(support.iter().map(|m| a + b * *m as f64).collect())
            }
            CostModel::Table { values } => {
                if values.len() != support.len() {
                    return Err(Error::InvalidParameter(format!(
                        "cost table has {} entries for {} group sizes",
                        values.len(),
                        support.len()
                    )));
                }
                Ok(values.clone())
            }
        }
    }
}

/// Law of the random group sizes: an optional finite prefix of per-stage
/// pmfs followed by a stationary pmf, all on a common finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSizeModel {
    support: Vec<usize>,
    pmf: Vec<f64>,
    #[serde(default)]
    prefix: Vec<Vec<f64>>,
}

impl GroupSizeModel {
    pub fn new(support: Vec<usize>, pmf: Vec<f64>, prefix: Vec<Vec<f64>>) -> Result<Self> {
        if support.is_empty() || support.len() != pmf.len() {
            return Err(Error::NotAPmf(format!(
                "group support has {} sizes but pmf has {} entries",
                support.len(),
                pmf.len()
            )));
        }
        let mut sorted = support.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(Error::InvalidParameter("group support values must be distinct".into()));
        }
        check_pmf("group pmf", &pmf)?;
        for (i, p) in prefix.iter().enumerate() {
            if p.len() != support.len() {
                return Err(Error::NotAPmf(format!("stage {} pmf has wrong length", i + 1)));
            }
            check_pmf(&format!("stage {} pmf", i + 1), p)?;
        }
        Ok(Self { support, pmf, prefix })
    }

    /// Stationary group sizes.
    pub fn stationary(support: Vec<usize>, pmf: Vec<f64>) -> Result<Self> {
        Self::new(support, pmf, Vec::new())
    }

    /// Every group has exactly `n` observations.
    pub fn fixed(n: usize) -> Self {
        Self { support: vec![n], pmf: vec![1.0], prefix: Vec::new() }
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn is_stationary(&self) -> bool {
        self.prefix.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    /// pmf of the size of group `k` (1-based).
    pub fn pmf_at(&self, k: usize) -> &[f64] {
        if k >= 1 && k <= self.prefix.len() {
            &self.prefix[k - 1]
        } else {
            &self.pmf
        }
    }

    pub fn tail_pmf(&self) -> &[f64] {
        &self.pmf
    }
}

/// Everything the dynamic program needs about one stage: the mixed law of the
/// group likelihood ratio, the mean group cost and the Hellinger rate.
#[derive(Debug, Clone, PartialEq)]
pub struct StageKernel {
    group_lr: LrDistribution,
    cost_mass: Vec<[f64; 2]>,
    mean_cost: f64,
    hellinger_rate: f64,
}

impl StageKernel {
    pub fn group_lr(&self) -> &LrDistribution {
        &self.group_lr
    }

    /// `E_i[c(nu) 1{atom}]` for each atom of [`Self::group_lr`], `i = 0, 1`.
    pub fn cost_mass(&self) -> &[[f64; 2]] {
        &self.cost_mass
    }

    /// `c_bar = sum_n p(n) c(n)`.
    pub fn mean_cost(&self) -> f64 {
        self.mean_cost
    }

    /// `r = sum_n p(n) h^n`, equal to `E0[z^(1/2)]` for one group.
    pub fn hellinger_rate(&self) -> f64 {
        self.hellinger_rate
    }

    /// The same kernel with every group cost multiplied so the mean is `c`.
    pub fn with_mean_cost(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("mean cost must be positive, got {c}")));
        }
        let s = c / self.mean_cost;
        Ok(Self {
            group_lr: self.group_lr.clone(),
            cost_mass: self.cost_mass.iter().map(|[a, b]| [a * s, b * s]).collect(),
            mean_cost: c,
            hellinger_rate: self.hellinger_rate,
        })
    }
}

/// Builds the kernel of one stage from the group-size pmf at that stage.
pub fn make_stage_kernel(
    model: &ObservationModel,
    support: &[usize],
    pmf: &[f64],
    cost: &CostModel,
    merge_tol: f64,
    cap: usize,
) -> Result<StageKernel> {
    let costs = cost.costs(support)?;
    let h = model.hellinger_affinity();
    let mut raw = Vec::new();
    let mut mean_cost = 0.0;
    let mut rate = 0.0;
    for ((&n, &p), &c) in support.iter().zip(pmf).zip(&costs) {
        if p == 0.0 {
            continue;
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::ZeroCost { size: n, cost: c });
        }
        mean_cost += p * c;
        rate += p * h.powi(n as i32);
        let law = model.group_lr(n, merge_tol, cap)?;
        raw.extend(law.atoms().iter().map(|a| WeightedAtom {
            log_lr: a.log_lr,
            p0: p * a.p0,
            p1: p * a.p1,
            q0: p * c * a.p0,
            q1: p * c * a.p1,
        }));
    }
    let merged = merge_atoms(raw, merge_tol);
    if merged.len() > cap {
        return Err(Error::AtomExplosion { count: merged.len(), cap });
    }
    let cost_mass = merged.iter().map(|a| [a.q0, a.q1]).collect();
    Ok(StageKernel {
        group_lr: LrDistribution::from_weighted(merged),
        cost_mass,
        mean_cost,
        hellinger_rate: rate,
    })
}

/// Stage kernels for every stage: a finite prefix then a stationary tail.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSequence {
    prefix: Vec<StageKernel>,
    tail: StageKernel,
}

impl KernelSequence {
    pub fn stationary(kernel: StageKernel) -> Self {
        Self { prefix: Vec::new(), tail: kernel }
    }

    pub fn new(prefix: Vec<StageKernel>, tail: StageKernel) -> Self {
        Self { prefix, tail }
    }

    pub fn build(
        model: &ObservationModel,
        groups: &GroupSizeModel,
        cost: &CostModel,
        merge_tol: f64,
        cap: usize,
    ) -> Result<Self> {
        let mk = |pmf: &[f64]| make_stage_kernel(model, groups.support(), pmf, cost, merge_tol, cap);
        let prefix = (1..=groups.prefix_len()).map(|k| mk(groups.pmf_at(k))).collect::<Result<_>>()?;
        Ok(Self { prefix, tail: mk(groups.tail_pmf())? })
    }

    /// Kernel governing group `k` (1-based).
    pub fn stage(&self, k: usize) -> &StageKernel {
        if k >= 1 && k <= self.prefix.len() {
            &self.prefix[k - 1]
        } else {
            &self.tail
        }
    }

    pub fn prefix(&self) -> &[StageKernel] {
        &self.prefix
    }

    pub fn tail(&self) -> &StageKernel {
        &self.tail
    }

    pub fn is_stationary(&self) -> bool {
        self.prefix.is_empty()
    }

    /// Rescales all costs by the factor that sets the tail mean cost to `c`.
    pub fn with_tail_mean_cost(&self, c: f64) -> Result<Self> {
        let s = c / self.tail.mean_cost;
        Ok(Self {
            prefix: self
                .prefix
                .iter()
                .map(|k| k.with_mean_cost(k.mean_cost * s))
                .collect::<Result<_>>()?,
            tail: self.tail.with_mean_cost(c)?,
        })
    }

    /// Every kernel in the sequence, prefix first.
    pub fn kernels(&self) -> impl Iterator<Item = &StageKernel> {
        self.prefix.iter().chain(std::iter::once(&self.tail))
    }
}
