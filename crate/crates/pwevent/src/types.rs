//! Domain types shared by all mechanisms: count vectors, stream batches,
//! privacy requirements, publication records and budget multisets.

use serde::{Deserialize, Serialize};

use crate::{Error, BUDGET_TOL};

/// A d-dimensional histogram of (possibly noisy) counts.
///
/// True counts are nonnegative with one contribution per present user; after
/// perturbation entries may be negative, no clipping happens at this layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountVector {
    pub values: Vec<f64>,
}

impl CountVector {
    pub fn zeros(d: usize) -> Self {
        CountVector { values: vec![0.0; d] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        CountVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Mean absolute difference per bucket, `(1/d) * sum_j |a_j - b_j|`.
    pub fn mean_abs_diff(&self, other: &CountVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        let d = self.dim() as f64;
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / d
    }

    /// Squared L2 distance, `sum_j (a_j - b_j)^2`.
    pub fn l2_sq(&self, other: &CountVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Copy with negative entries clipped to zero.
    pub fn clip_nonnegative(&self) -> CountVector {
        CountVector {
            values: self.values.iter().map(|v| v.max(0.0)).collect(),
        }
    }
}

/// One stream element: the per-user bucket assignments at a time slot.
///
/// `assignments[i]` is user i's bucket in `[0, d)`, or `None` when the user
/// contributes nothing this slot. Exactly one bucket (or absence) per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    /// 1-based time slot.
    pub slot: u64,
    pub assignments: Vec<Option<u32>>,
}

impl StreamBatch {
    pub fn n_users(&self) -> usize {
        self.assignments.len()
    }

    /// True histogram of all present users.
    pub fn histogram(&self, d: usize) -> CountVector {
        let mut values = vec![0.0; d];
        for a in self.assignments.iter().flatten() {
            let j = *a as usize;
            assert!(j < d, "bucket {j} out of range for d={d}");
            values[j] += 1.0;
        }
        CountVector { values }
    }
}

/// A fixed per-user requirement: budget `budget` over any window of
/// `window` consecutive slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedRequirement {
    pub window: u64,
    pub budget: f64,
}

impl FixedRequirement {
    pub fn new(window: u64, budget: f64) -> Result<Self, Error> {
        if window < 1 {
            return Err(Error::invalid("window must be >= 1"));
        }
        if budget.is_nan() || budget <= 0.0 {
            return Err(Error::invalid("budget must be > 0"));
        }
        Ok(FixedRequirement { window, budget })
    }

    /// Per-slot budget share `E / (2w)`, the unit of spend in each of the
    /// two mechanism phases.
    pub fn share(&self) -> f64 {
        self.budget / (2.0 * self.window as f64)
    }
}

/// A per-slot requirement pair: a backward window ending at the current
/// slot and a forward window starting at it, each with its own budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicRequirement {
    pub backward_window: u64,
    pub backward_budget: f64,
    pub forward_window: u64,
    pub forward_budget: f64,
}

impl DynamicRequirement {
    pub fn new(
        backward_window: u64,
        backward_budget: f64,
        forward_window: u64,
        forward_budget: f64,
    ) -> Result<Self, Error> {
        if backward_window < 1 || forward_window < 1 {
            return Err(Error::invalid("windows must be >= 1"));
        }
        let bad = |b: f64| b.is_nan() || b <= 0.0;
        if bad(backward_budget) || bad(forward_budget) {
            return Err(Error::invalid("budgets must be > 0"));
        }
        Ok(DynamicRequirement {
            backward_window,
            backward_budget,
            forward_window,
            forward_budget,
        })
    }

    /// Per-slot share of the forward budget, `E_F / (2 w_F)`.
    pub fn forward_share(&self) -> f64 {
        self.forward_budget / (2.0 * self.forward_window as f64)
    }
}

/// How a slot's release was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    /// A fresh perturbed histogram was published, spending publication
    /// budget.
    NonNull,
    /// The dissimilarity test chose to reuse the previous release.
    Skipped,
    /// A prior publication had already absorbed this slot's budget share;
    /// the previous release is reused without running the comparison.
    Nullified,
    /// An injected decision forced a null release, bypassing the
    /// dissimilarity test.
    Forced,
}

impl Decision {
    pub fn is_non_null(self) -> bool {
        matches!(self, Decision::NonNull)
    }
}

/// The outcome of one mechanism step.
///
/// Invariant: when `decision != NonNull`, `eps2_vector` is all zeros and
/// `release` equals the previous slot's release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicationRecord {
    pub slot: u64,
    pub release: CountVector,
    pub decision: Decision,
    /// Publication-phase budgets actually charged this slot.
    pub eps2_vector: Vec<f64>,
    /// Threshold chosen by optimal budget selection for the release;
    /// absent for null releases.
    pub eps_opt: Option<f64>,
    /// True for users whose declared backward budget was projected up to
    /// the minimal feasible value this slot (dynamic mechanisms only).
    pub projected: Vec<bool>,
}

/// Distinct positive budgets with multiplicities, ascending in budget.
///
/// Zero budgets are excluded from `pairs` and counted in `excluded_count`,
/// so `sum(n_j) + excluded_count` equals the input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetQuantityPairs {
    pub pairs: Vec<(f64, usize)>,
    pub excluded_count: usize,
}

impl BudgetQuantityPairs {
    pub fn total_included(&self) -> usize {
        self.pairs.iter().map(|(_, n)| n).sum()
    }

    pub fn min_budget(&self) -> Option<f64> {
        self.pairs.first().map(|(e, _)| *e)
    }

    pub fn max_budget(&self) -> Option<f64> {
        self.pairs.last().map(|(e, _)| *e)
    }

    /// Multiplicity of the maximum budget.
    pub fn max_multiplicity(&self) -> usize {
        self.pairs.last().map(|(_, n)| *n).unwrap_or(0)
    }
}

/// Collapses a per-user budget vector into distinct budget/quantity pairs.
///
/// Entries within [`BUDGET_TOL`] of each other collapse to one pair keyed by
/// the first value seen in ascending order; entries at or below the
/// tolerance count as zero and are excluded. Order-insensitive.
pub fn collapse_budgets(eps_vector: &[f64]) -> BudgetQuantityPairs {
    let mut sorted: Vec<f64> = eps_vector.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("budgets must not be NaN"));

    let mut pairs: Vec<(f64, usize)> = Vec::new();
    let mut excluded_count = 0usize;
    for e in sorted {
        assert!(e >= 0.0, "budgets must be nonnegative");
        if e <= BUDGET_TOL {
            excluded_count += 1;
            continue;
        }
        match pairs.last_mut() {
            Some((key, n)) if (e - *key).abs() <= BUDGET_TOL => *n += 1,
            _ => pairs.push((e, 1)),
        }
    }
    BudgetQuantityPairs { pairs, excluded_count }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_running_example() {
        let eps = [0.1, 0.4, 0.4, 0.1, 0.4, 0.4, 0.8, 0.8, 0.8, 0.4];
        let p = collapse_budgets(&eps);
        assert_eq!(p.pairs, vec![(0.1, 2), (0.4, 5), (0.8, 3)]);
        assert_eq!(p.excluded_count, 0);
    }

    #[test]
    fn collapse_all_equal() {
        let p = collapse_budgets(&[1.0; 5]);
        assert_eq!(p.pairs, vec![(1.0, 5)]);
    }

    #[test]
    fn collapse_excludes_zeros() {
        let p = collapse_budgets(&[0.0, 0.5]);
        assert_eq!(p.pairs, vec![(0.5, 1)]);
        assert_eq!(p.excluded_count, 1);
        assert_eq!(p.total_included() + p.excluded_count, 2);
    }

    #[test]
    fn histogram_counts_present_users() {
        let b = StreamBatch {
            slot: 1,
            assignments: vec![Some(0), Some(1), None, Some(1)],
        };
        assert_eq!(b.histogram(3).values, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn requirement_validation() {
        assert!(FixedRequirement::new(0, 1.0).is_err());
        assert!(FixedRequirement::new(4, 0.0).is_err());
        assert!(DynamicRequirement::new(1, 1.0, 0, 1.0).is_err());
        let r = FixedRequirement::new(4, 1.0).unwrap();
        assert_eq!(r.share(), 0.125);
    }
}
