//! Two-phase sampling mechanism over heterogeneous budgets and the optimal
//! threshold selection that drives it.
//!
//! Given per-user budgets, a threshold `eps_theta` is chosen among the
//! distinct declared budgets. Users at or above the threshold enter the
//! sample deterministically; a user below it enters independently with
//! probability `(e^eps_i - 1) / (e^eps_theta - 1)`; the sampled histogram
//! is then perturbed with Laplace noise calibrated to the threshold. The
//! threshold minimizing sampling error plus noise error is returned by
//! [`obs`].

use crate::noise::{noise_error, NoiseGen};
use crate::types::{collapse_budgets, BudgetQuantityPairs, CountVector, StreamBatch};
use crate::BUDGET_TOL;

/// Inclusion probability of a budget below the threshold.
pub fn inclusion_probability(eps_i: f64, eps_theta: f64) -> f64 {
    if eps_i >= eps_theta {
        1.0
    } else {
        (eps_i.exp() - 1.0) / (eps_theta.exp() - 1.0)
    }
}

/// Sampling error at threshold `eps_theta`: variance plus squared bias of
/// the sampled count over the sub-threshold users,
/// `sum n_i p_i (1-p_i) + (sum n_i (1-p_i))^2`.
///
/// Users with budget at or above the threshold contribute nothing.
pub fn sampling_error(pairs: &BudgetQuantityPairs, eps_theta: f64) -> f64 {
    assert!(eps_theta > 0.0, "eps_theta must be > 0");
    let mut var = 0.0;
    let mut bias = 0.0;
    for &(e, n) in &pairs.pairs {
        if e < eps_theta {
            let p = inclusion_probability(e, eps_theta);
            let n = n as f64;
            var += n * p * (1.0 - p);
            bias += n * (1.0 - p);
        }
    }
    var + bias * bias
}

/// Result of optimal budget selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsResult {
    /// Chosen threshold; always a member of the distinct declared budgets.
    pub eps_opt: f64,
    /// Total reporting error at `eps_opt`.
    pub err_min: f64,
    /// Every candidate with its total error, ascending in budget.
    pub per_candidate_errors: Vec<(f64, f64)>,
}

/// Picks the distinct declared budget minimizing sampling plus noise error.
///
/// Ties within [`BUDGET_TOL`] break toward the smallest threshold. Returns
/// `None` when no budget is strictly positive; callers must then produce a
/// null publication.
pub fn obs(eps_vector: &[f64]) -> Option<ObsResult> {
    obs_from_pairs(&collapse_budgets(eps_vector))
}

/// [`obs`] on an already-collapsed budget multiset.
pub fn obs_from_pairs(pairs: &BudgetQuantityPairs) -> Option<ObsResult> {
    if pairs.pairs.is_empty() {
        return None;
    }
    let mut per_candidate_errors = Vec::with_capacity(pairs.pairs.len());
    let mut best: Option<(f64, f64)> = None;
    for &(e, _) in &pairs.pairs {
        let err = sampling_error(pairs, e) + noise_error(e).expect("positive candidate");
        per_candidate_errors.push((e, err));
        // Candidates ascend, so a strict improvement beyond the tolerance is
        // required to move the winner off a smaller threshold.
        match best {
            Some((_, best_err)) if err >= best_err - BUDGET_TOL => {}
            _ => best = Some((e, err)),
        }
    }
    let (eps_opt, err_min) = best.expect("nonempty candidates");
    Some(ObsResult { eps_opt, err_min, per_candidate_errors })
}

/// Sample step: returns the true histogram of the sampled user subset.
///
/// Users with zero budget are excluded outright; users below the threshold
/// are kept with their inclusion probability.
pub fn sm_sample(
    batch: &StreamBatch,
    eps_vector: &[f64],
    eps_opt: f64,
    d: usize,
    gen: &mut NoiseGen,
) -> CountVector {
    assert!(eps_opt > 0.0, "eps_opt must be > 0");
    assert_eq!(batch.n_users(), eps_vector.len());
    let mut values = vec![0.0; d];
    for (assignment, &e) in batch.assignments.iter().zip(eps_vector) {
        let Some(bucket) = assignment else { continue };
        if e <= BUDGET_TOL {
            continue;
        }
        let p = inclusion_probability(e, eps_opt);
        if p >= 1.0 || gen.uniform() < p {
            values[*bucket as usize] += 1.0;
        }
    }
    CountVector { values }
}

/// Disturb step: element-wise Laplace(1/eps_opt) noise. Output may be
/// negative; no clipping at this layer.
pub fn sm_disturb(c_tilde: &CountVector, eps_opt: f64, gen: &mut NoiseGen) -> CountVector {
    assert!(eps_opt > 0.0, "eps_opt must be > 0");
    let scale = 1.0 / eps_opt;
    CountVector {
        values: c_tilde.values.iter().map(|v| v + gen.laplace(scale)).collect(),
    }
}

/// Closed-form upper bound on the error of the sample-then-disturb process
/// with the threshold chosen by [`obs`], for a query of sensitivity `I`:
/// `min(2 I^2 / min_eps^2, (n - n_A)(n - n_A + 1/4) + 2 I^2 / max_eps^2)`
/// where `n_A` is the multiplicity of the maximum budget.
pub fn sm_error_upper_bound(pairs: &BudgetQuantityPairs, sensitivity: f64) -> f64 {
    assert!(!pairs.pairs.is_empty(), "pairs must be nonempty");
    assert!(sensitivity > 0.0);
    let i2 = sensitivity * sensitivity;
    let min_e = pairs.min_budget().unwrap();
    let max_e = pairs.max_budget().unwrap();
    let n = pairs.total_included() as f64;
    let n_a = pairs.max_multiplicity() as f64;
    let low = 2.0 * i2 / (min_e * min_e);
    let high = (n - n_a) * (n - n_a + 0.25) + 2.0 * i2 / (max_e * max_e);
    low.min(high)
}
