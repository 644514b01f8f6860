use serde::{Deserialize, Serialize};

/// The operating characteristics an optimality audit compares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcPoint {
    pub alpha: f64,
    pub beta: f64,
    pub k0: f64,
    pub k1: f64,
}

/// A candidate with no larger error probabilities but a smaller expected cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub index: usize,
    pub candidate: OcPoint,
    /// `K_reference - K_candidate` (positive).
    pub margin: f64,
    /// 0 or 1: which expected cost is beaten.
    pub hypothesis: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub reference: OcPoint,
    pub checked: usize,
    /// Candidates with `alpha' <= alpha` and `beta' <= beta`.
    pub eligible: usize,
    pub violations: Vec<AuditViolation>,
    /// Smallest `K0' - K0` over eligible candidates.
    pub min_margin_k0: Option<f64>,
    pub min_margin_k1: Option<f64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that no candidate with `alpha' <= alpha` and `beta' <= beta` has
/// `K0' < K0` (and, with `check_k1`, `K1' < K1`). Error comparisons allow a
/// slack of `tol`; cost comparisons flag only shortfalls larger than `tol`.
pub fn constrained_optimality_audit<'a>(
    reference: &OcPoint,
    candidates: impl IntoIterator<Item = &'a OcPoint>,
    check_k1: bool,
    tol: f64,
) -> AuditReport {
    let mut report = AuditReport {
        reference: *reference,
        checked: 0,
        eligible: 0,
        violations: Vec::new(),
        min_margin_k0: None,
        min_margin_k1: None,
    };
    for (index, c) in candidates.into_iter().enumerate() {
        report.checked += 1;
        if c.alpha > reference.alpha + tol || c.beta > reference.beta + tol {
            continue;
        }
        report.eligible += 1;
        let d0 = c.k0 - reference.k0;
        let d1 = c.k1 - reference.k1;
        report.min_margin_k0 = Some(report.min_margin_k0.map_or(d0, |m| m.min(d0)));
        report.min_margin_k1 = Some(report.min_margin_k1.map_or(d1, |m| m.min(d1)));
        if d0 < -tol {
            report.violations.push(AuditViolation { index, candidate: *c, margin: -d0, hypothesis: 0 });
        }
        if check_k1 && d1 < -tol {
            report.violations.push(AuditViolation { index, candidate: *c, margin: -d1, hypothesis: 1 });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_against_itself() {
        let p = OcPoint { alpha: 0.1, beta: 0.2, k0: 3.0, k1: 4.0 };
        let r = constrained_optimality_audit(&p, [&p], true, 1e-12);
        assert!(r.passed());
        assert_eq!((r.eligible, r.min_margin_k0), (1, Some(0.0)));
    }

    #[test]
    fn cheaper_dominating_candidate_is_flagged() {
        let p = OcPoint { alpha: 0.1, beta: 0.2, k0: 3.0, k1: 4.0 };
        let better = OcPoint { alpha: 0.05, beta: 0.2, k0: 2.5, k1: 4.5 };
        let worse_errors = OcPoint { alpha: 0.2, beta: 0.0, k0: 0.1, k1: 0.1 };
        let r = constrained_optimality_audit(&p, [&better, &worse_errors], false, 1e-12);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].hypothesis, 0);
        assert!((r.violations[0].margin - 0.5).abs() < 1e-15);
        let r = constrained_optimality_audit(&p, [&better], true, 1e-12);
        assert_eq!(r.violations.len(), 1);
    }
}
