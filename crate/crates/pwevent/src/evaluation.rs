//! Utility metrics and ledger audits.
//!
//! Audits re-derive every window constraint from the recorded ledger alone,
//! so they are an independent check on the mechanisms rather than a replay
//! of their internal bookkeeping. Violations are data, not errors: the
//! report lists them with locations and the harness refuses to publish
//! utility numbers for a violating trace without the flag.

use serde::{Deserialize, Serialize};

use crate::ledger::{BudgetLedger, Phase};
use crate::types::{CountVector, Decision, DynamicRequirement, FixedRequirement};
use crate::BUDGET_TOL;

/// Everything one mechanism run produced, enough to audit and score it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub d: usize,
    pub true_counts: Vec<CountVector>,
    pub releases: Vec<CountVector>,
    pub decisions: Vec<Decision>,
    pub ledger: BudgetLedger,
    pub mechanism: String,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.true_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_counts.is_empty()
    }

    pub fn decision_counts(&self) -> DecisionCounts {
        let mut c = DecisionCounts::default();
        for d in &self.decisions {
            match d {
                Decision::NonNull => c.non_null += 1,
                Decision::Skipped => c.skipped += 1,
                Decision::Nullified => c.nullified += 1,
                Decision::Forced => c.forced += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub non_null: usize,
    pub skipped: usize,
    pub nullified: usize,
    pub forced: usize,
}

/// Average per-slot squared L2 error over the dimension:
/// `(1/T) sum_t (1/d) ||r_t - c_t||_2^2`.
pub fn amre(trace: &RunTrace) -> f64 {
    assert!(!trace.is_empty());
    assert_eq!(trace.true_counts.len(), trace.releases.len());
    let d = trace.d as f64;
    let t = trace.len() as f64;
    trace
        .true_counts
        .iter()
        .zip(&trace.releases)
        .map(|(c, r)| r.l2_sq(c) / d)
        .sum::<f64>()
        / t
}

/// Average Jensen-Shannon divergence between released and true counts.
///
/// Applied to raw counts, not normalized distributions: releases are
/// clipped at zero element-wise, the midpoint is `(r + c) / 2`, logs are
/// natural, and `0 * log(0/x)` terms contribute zero. Set `normalize` to
/// compare probability-normalized vectors instead (analysis aid only).
pub fn ajsd(trace: &RunTrace) -> f64 {
    ajsd_with(trace, false)
}

pub fn ajsd_with(trace: &RunTrace, normalize: bool) -> f64 {
    assert!(!trace.is_empty());
    let t = trace.len() as f64;
    trace
        .true_counts
        .iter()
        .zip(&trace.releases)
        .map(|(c, r)| jsd(&r.clip_nonnegative(), c, normalize))
        .sum::<f64>()
        / t
}

fn jsd(r: &CountVector, c: &CountVector, normalize: bool) -> f64 {
    let (rv, cv) = if normalize {
        (normalized(&r.values), normalized(&c.values))
    } else {
        (r.values.clone(), c.values.clone())
    };
    let mut acc = 0.0;
    for (a, b) in rv.iter().zip(&cv) {
        let v = 0.5 * (a + b);
        if v <= 0.0 {
            continue;
        }
        if *a > 0.0 {
            acc += 0.5 * a * (a / v).ln();
        }
        if *b > 0.0 {
            acc += 0.5 * b * (b / v).ln();
        }
    }
    acc
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / s).collect()
    }
}

/// One budget-constraint violation found by an audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub user: usize,
    /// Slot the violated window ends at (backward) or starts at (forward).
    pub slot: u64,
    pub window_sum: f64,
    pub limit: f64,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    FixedWindow,
    Backward,
    Forward,
}

/// Audit outcome: every checked constraint with the slack distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub checked: usize,
    /// Smallest limit-minus-sum over all checks (how close the run came).
    pub min_slack: f64,
    pub max_slack: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn from_checks(checks: impl Iterator<Item = (usize, u64, f64, f64, ConstraintKind)>) -> Self {
        let mut violations = Vec::new();
        let mut checked = 0usize;
        let mut min_slack = f64::INFINITY;
        let mut max_slack = f64::NEG_INFINITY;
        for (user, slot, window_sum, limit, kind) in checks {
            checked += 1;
            let slack = limit - window_sum;
            min_slack = min_slack.min(slack);
            max_slack = max_slack.max(slack);
            if window_sum > limit + BUDGET_TOL {
                violations.push(Violation { user, slot, window_sum, limit, kind });
            }
        }
        AuditReport { violations, checked, min_slack, max_slack }
    }
}

/// Mean per-slot squared L2 error (over d) measured on the nullified slots
/// of a trace, the data-dependent quantity the absorption bounds take as
/// input. Zero when no slot was nullified.
pub fn measured_nullified_error(trace: &RunTrace) -> f64 {
    let d = trace.d as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((c, r), decision) in
        trace.true_counts.iter().zip(&trace.releases).zip(&trace.decisions)
    {
        if *decision == Decision::Nullified {
            sum += r.l2_sq(c) / d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Checks every user's total spend over every trailing fixed window
/// against their budget.
pub fn audit_fixed(ledger: &BudgetLedger, requirements: &[FixedRequirement]) -> AuditReport {
    assert_eq!(ledger.n_users(), requirements.len());
    let t_max = ledger.current_slot();
    let checks = requirements.iter().enumerate().flat_map(|(user, req)| {
        (1..=t_max).map(move |t| {
            let sum = ledger.window_sum_clamped(
                user,
                Phase::Total,
                t as i64 - req.window as i64 + 1,
                t as i64,
            );
            (user, t, sum, req.budget, ConstraintKind::FixedWindow)
        })
    });
    AuditReport::from_checks(checks)
}

/// Checks both dynamic constraints against the effective (post-projection)
/// requirement history: the backward window ending at each slot, and every
/// declared forward window `[tau, tau + w_F - 1]`, truncated at the end of
/// the recorded stream.
pub fn audit_dynamic(
    ledger: &BudgetLedger,
    requirement_history: &[Vec<DynamicRequirement>],
) -> AuditReport {
    let t_max = ledger.current_slot();
    assert_eq!(requirement_history.len() as u64, t_max);
    let n = ledger.n_users();
    let checks = (1..=t_max).flat_map(move |t| {
        let reqs = &requirement_history[(t - 1) as usize];
        assert_eq!(reqs.len(), n);
        (0..n).flat_map(move |user| {
            let req = reqs[user];
            let backward = {
                let sum = ledger.window_sum_clamped(
                    user,
                    Phase::Total,
                    t as i64 - req.backward_window as i64 + 1,
                    t as i64,
                );
                (user, t, sum, req.backward_budget, ConstraintKind::Backward)
            };
            let forward = {
                let end = (t + req.forward_window - 1).min(t_max);
                let sum = ledger.window_sum_clamped(user, Phase::Total, t as i64, end as i64);
                (user, t, sum, req.forward_budget, ConstraintKind::Forward)
            };
            [backward, forward]
        })
    });
    AuditReport::from_checks(checks)
}
