//! Mechanisms for per-slot requirements with backward and forward windows.
//!
//! At every slot each user declares a backward requirement (budget over a
//! window ending now) and a forward requirement (budget over a window
//! starting now). Spend at the current slot must stay feasible for the
//! backward declaration and for every still-open forward declaration from
//! the past. The distribution variant schedules the feasible publication
//! budget conservatively; the absorption variant banks per-slot shares of
//! the open forward windows and nullifies the slots a burst consumed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::fixed::{dc, finish_slot, ForcedDecision};
use crate::ledger::{BudgetLedger, Phase};
use crate::types::{CountVector, Decision, DynamicRequirement, PublicationRecord, StreamBatch};
use crate::BUDGET_TOL;

/// One forward declaration still covering the current slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardEntry {
    /// Slot the declaration was made at.
    pub slot: u64,
    pub window: u64,
    pub budget: f64,
}

impl ForwardEntry {
    /// Per-slot share `E_F / (2 w_F)` of this declaration.
    pub fn share(&self) -> f64 {
        self.budget / (2.0 * self.window as f64)
    }

    pub fn covers(&self, t: u64) -> bool {
        self.slot <= t && self.slot + self.window > t
    }
}

/// Which past forward declarations the absorption budget scan ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionWindow {
    /// Every declaration whose forward window still covers the current
    /// slot. Keeps the spend within each open declaration's half budget,
    /// so ledger audits stay clean. Default.
    #[default]
    DeclaredCover,
    /// Only declarations made within the last `w_F` slots, where `w_F` is
    /// the current slot's own forward window. Absorbs more aggressively
    /// when forward windows shrink over time; an older, longer declaration
    /// can then be overspent, which the ledger audit will flag. Matches
    /// the published worked absorption traces.
    RecentLookback,
}

/// Per-user sliding queues of open forward declarations.
///
/// An entry enters when declared and leaves once its window no longer
/// covers the current slot, so each entry is pushed and removed exactly
/// once. Membership equals the definitional set at every slot; see
/// [`DynamicMechanismState::verify_window_sets`].
#[derive(Debug, Clone, Default)]
pub struct ForwardWindowSet {
    queues: Vec<VecDeque<ForwardEntry>>,
}

impl ForwardWindowSet {
    pub fn new(n_users: usize) -> Self {
        ForwardWindowSet { queues: vec![VecDeque::new(); n_users] }
    }

    /// Declares slot `t`'s forward requirements and drops entries whose
    /// windows ended before `t`. Expired entries can be interior (a short
    /// window declared after a long one), so this is a retain pass; each
    /// entry is still removed only once over its lifetime.
    pub fn advance(&mut self, t: u64, declared: &[DynamicRequirement]) {
        assert_eq!(declared.len(), self.queues.len());
        for (queue, req) in self.queues.iter_mut().zip(declared) {
            queue.push_back(ForwardEntry {
                slot: t,
                window: req.forward_window,
                budget: req.forward_budget,
            });
            queue.retain(|e| e.covers(t));
        }
    }

    pub fn entries(&self, user: usize) -> impl Iterator<Item = &ForwardEntry> {
        self.queues[user].iter()
    }

    pub fn covering_slots(&self, user: usize) -> Vec<u64> {
        self.queues[user].iter().map(|e| e.slot).collect()
    }

    pub fn len(&self, user: usize) -> usize {
        self.queues[user].len()
    }

    pub fn is_empty(&self, user: usize) -> bool {
        self.queues[user].is_empty()
    }
}

/// Detailed per-user budget bounds from the most recent distribution step.
#[derive(Debug, Clone, Default)]
pub struct DpbdDetail {
    pub eps_f1: Vec<f64>,
    pub eps_b1: Vec<f64>,
    pub eps1: Vec<f64>,
    pub eps_f2: Vec<f64>,
    pub eps_b2: Vec<f64>,
    /// min of the two phase-2 bounds, floored at zero, before the
    /// publish/skip decision zeroes it.
    pub eps2_bound: Vec<f64>,
}

/// Detailed per-user budget bounds from the most recent absorption step.
#[derive(Debug, Clone, Default)]
pub struct DpbaDetail {
    pub eps1: Vec<f64>,
    /// Per-user nullified right border, max over open declarations.
    pub r_fn: Vec<f64>,
    /// System-wide nullified right border.
    pub r_fn_max: f64,
    pub nullified: bool,
    /// Empty when the slot was nullified.
    pub eps_af: Vec<f64>,
    pub eps_uf: Vec<f64>,
    pub eps_fa: Vec<f64>,
    pub eps_ub: Vec<f64>,
    pub eps2_bound: Vec<f64>,
}

/// Rolling state for one dynamic-requirement run.
#[derive(Debug, Clone)]
pub struct DynamicMechanismState {
    pub ledger: BudgetLedger,
    pub publications: Vec<PublicationRecord>,
    /// Effective (post-projection) requirements, `[slot-1][user]`.
    pub requirement_history: Vec<Vec<DynamicRequirement>>,
    /// Which users were projected at each slot.
    pub projection_history: Vec<Vec<bool>>,
    pub last_release: CountVector,
    pub last_nonnull: CountVector,
    pub last_nonnull_slot: u64,
    pub absorption_window: AbsorptionWindow,
    /// Cross-check the forward queues against a naive rebuild every slot.
    pub verify_window_sets: bool,
    pub forward: ForwardWindowSet,
    pub last_dpbd_detail: Option<DpbdDetail>,
    pub last_dpba_detail: Option<DpbaDetail>,
    max_forward_window: u64,
    n_users: usize,
    d: usize,
}

impl DynamicMechanismState {
    pub fn new(n_users: usize, d: usize) -> Self {
        assert!(d >= 1, "dimension must be >= 1");
        DynamicMechanismState {
            ledger: BudgetLedger::new(n_users),
            publications: Vec::new(),
            requirement_history: Vec::new(),
            projection_history: Vec::new(),
            last_release: CountVector::zeros(d),
            last_nonnull: CountVector::zeros(d),
            last_nonnull_slot: 0,
            absorption_window: AbsorptionWindow::default(),
            verify_window_sets: false,
            forward: ForwardWindowSet::new(n_users),
            last_dpbd_detail: None,
            last_dpba_detail: None,
            max_forward_window: 1,
            n_users,
            d,
        }
    }

    pub fn with_absorption_window(mut self, policy: AbsorptionWindow) -> Self {
        self.absorption_window = policy;
        self
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Declares slot `t`'s requirements: projects infeasible backward
    /// budgets, records the effective requirements, and slides the forward
    /// queues. Called exactly once per slot by the step functions.
    fn declare_slot(&mut self, t: u64, declared: &[DynamicRequirement]) -> Vec<DynamicRequirement> {
        assert_eq!(declared.len(), self.n_users);
        let mut effective = Vec::with_capacity(self.n_users);
        let mut flags = Vec::with_capacity(self.n_users);
        for (user, req) in declared.iter().enumerate() {
            let (eff, projected) = project_backward_requirement(req, &self.ledger, user, t);
            effective.push(eff);
            flags.push(projected);
        }
        self.requirement_history.push(effective.clone());
        self.projection_history.push(flags);
        for req in &effective {
            self.max_forward_window = self.max_forward_window.max(req.forward_window);
        }
        self.forward.advance(t, &effective);
        for user in 0..self.n_users {
            debug_assert!(
                self.forward.len(user) <= self.max_forward_window as usize,
                "forward queue exceeded its window bound"
            );
        }
        if self.verify_window_sets {
            self.assert_window_sets_match_naive(t);
        }
        effective
    }

    /// Rebuilds every user's covering set from the full declaration history
    /// and compares it with the queue contents.
    fn assert_window_sets_match_naive(&self, t: u64) {
        for user in 0..self.n_users {
            let naive: Vec<u64> = (1..=t)
                .filter(|&tau| {
                    let w = self.requirement_history[(tau - 1) as usize][user].forward_window;
                    tau + w > t
                })
                .collect();
            assert_eq!(
                self.forward.covering_slots(user),
                naive,
                "forward window set diverged from naive rebuild at slot {t}, user {user}"
            );
        }
    }

    fn next_slot(&self, batch: &StreamBatch) -> u64 {
        let t = self.ledger.current_slot() + 1;
        assert_eq!(batch.slot, t, "batches must arrive in slot order");
        assert_eq!(batch.n_users(), self.n_users, "user count changed mid-run");
        t
    }

    /// Phase-1 budgets under both feasibility conditions: the smallest open
    /// forward share versus the backward half budget net of trailing
    /// phase-1 spend, floored at zero.
    fn phase1_budgets(&self, t: u64, effective: &[DynamicRequirement]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut eps_f1 = Vec::with_capacity(self.n_users);
        let mut eps_b1 = Vec::with_capacity(self.n_users);
        let mut eps1 = Vec::with_capacity(self.n_users);
        for (user, req) in effective.iter().enumerate() {
            let f = self
                .forward
                .entries(user)
                .map(ForwardEntry::share)
                .fold(f64::INFINITY, f64::min);
            let spent = self.ledger.window_sum_clamped(
                user,
                Phase::Calculation,
                t as i64 - req.backward_window as i64 + 1,
                t as i64 - 1,
            );
            let b = req.backward_budget / 2.0 - spent;
            eps_f1.push(f);
            eps_b1.push(b);
            eps1.push(f.min(b).max(0.0));
        }
        (eps_f1, eps_b1, eps1)
    }

    fn backward_phase2_bound(&self, t: u64, user: usize, req: &DynamicRequirement) -> f64 {
        let spent = self.ledger.window_sum_clamped(
            user,
            Phase::Publication,
            t as i64 - req.backward_window as i64 + 1,
            t as i64 - 1,
        );
        req.backward_budget / 2.0 - spent
    }

    /// Publication spend since declaration `entry`, `sum eps2 over [tau, t-1]`.
    fn spend_since(&self, user: usize, entry: &ForwardEntry, t: u64) -> f64 {
        self.ledger
            .window_sum_clamped(user, Phase::Publication, entry.slot as i64, t as i64 - 1)
    }

    /// Entries the absorption scan ranges over at slot `t` under the
    /// configured policy.
    fn absorption_entries(&self, user: usize, t: u64, current_w_f: u64) -> Vec<ForwardEntry> {
        self.forward
            .entries(user)
            .filter(|e| match self.absorption_window {
                AbsorptionWindow::DeclaredCover => true,
                AbsorptionWindow::RecentLookback => e.slot + current_w_f > t,
            })
            .copied()
            .collect()
    }
}

/// Raises an infeasible declared backward budget to the minimal value that
/// keeps both phase bounds nonnegative: twice the larger single-phase spend
/// in the trailing window (equal to the plain total spend when the phases
/// are balanced). Projection never rejects; the flag marks the record.
pub fn project_backward_requirement(
    declared: &DynamicRequirement,
    ledger: &BudgetLedger,
    user: usize,
    t: u64,
) -> (DynamicRequirement, bool) {
    let from = t as i64 - declared.backward_window as i64 + 1;
    let to = t as i64 - 1;
    let s1 = ledger.window_sum_clamped(user, Phase::Calculation, from, to);
    let s2 = ledger.window_sum_clamped(user, Phase::Publication, from, to);
    let required = 2.0 * s1.max(s2);
    if declared.backward_budget + BUDGET_TOL < required {
        let mut eff = *declared;
        eff.backward_budget = required;
        (eff, true)
    } else {
        (*declared, false)
    }
}

/// One dynamic distribution step.
pub fn dpbd_step(
    state: &mut DynamicMechanismState,
    batch: &StreamBatch,
    declared: &[DynamicRequirement],
    forced: Option<ForcedDecision>,
    gen: &mut crate::noise::NoiseGen,
) -> PublicationRecord {
    let t = state.next_slot(batch);
    let effective = state.declare_slot(t, declared);
    let d = state.d;

    let (eps_f1, eps_b1, eps1) = state.phase1_budgets(t, &effective);
    let dis = dc(batch, &eps1, &state.last_nonnull, d, gen);

    let mut eps_f2 = Vec::with_capacity(state.n_users);
    let mut eps_b2 = Vec::with_capacity(state.n_users);
    let mut eps2 = Vec::with_capacity(state.n_users);
    for (user, req) in effective.iter().enumerate() {
        // Half of the tightest remaining forward half-budget: the other
        // half stays in reserve for the rest of each open window.
        let f = 0.5
            * state
                .forward
                .entries(user)
                .map(|e| e.budget / 2.0 - state.spend_since(user, e, t))
                .fold(f64::INFINITY, f64::min);
        let b = state.backward_phase2_bound(t, user, req);
        eps_f2.push(f);
        eps_b2.push(b);
        eps2.push(f.min(b).max(0.0));
    }

    state.last_dpbd_detail = Some(DpbdDetail {
        eps_f1,
        eps_b1,
        eps1: eps1.clone(),
        eps_f2,
        eps_b2,
        eps2_bound: eps2.clone(),
    });

    let projected = state.projection_history.last().unwrap().clone();
    let st = crate::fixed::ReleaseState {
        ledger: &mut state.ledger,
        publications: &mut state.publications,
        last_release: &mut state.last_release,
        last_nonnull: &mut state.last_nonnull,
        last_nonnull_slot: &mut state.last_nonnull_slot,
        d,
    };
    finish_slot(st, batch, t, &eps1, eps2, dis, forced, projected, gen)
}

/// One dynamic absorption step.
pub fn dpba_step(
    state: &mut DynamicMechanismState,
    batch: &StreamBatch,
    declared: &[DynamicRequirement],
    forced: Option<ForcedDecision>,
    gen: &mut crate::noise::NoiseGen,
) -> PublicationRecord {
    let t = state.next_slot(batch);
    let effective = state.declare_slot(t, declared);
    let d = state.d;
    let n = state.n_users;

    let (_, _, eps1) = state.phase1_budgets(t, &effective);
    let dis = dc(batch, &eps1, &state.last_nonnull, d, gen);

    // Nullified right border: how far the publication spend charged against
    // each open forward declaration reaches, in that declaration's shares.
    let mut r_fn = Vec::with_capacity(n);
    for user in 0..n {
        let border = state
            .forward
            .entries(user)
            .map(|e| state.spend_since(user, e, t) / e.share() + e.slot as f64 - 1.0)
            .fold(0.0f64, f64::max);
        r_fn.push(border);
    }
    let r_fn_max = r_fn.iter().copied().fold(0.0f64, f64::max);

    if t as f64 <= r_fn_max + BUDGET_TOL {
        state.ledger.record_slot(t, &eps1, &vec![0.0; n]);
        state.last_dpba_detail = Some(DpbaDetail {
            eps1,
            r_fn,
            r_fn_max,
            nullified: true,
            ..Default::default()
        });
        let record = PublicationRecord {
            slot: t,
            release: state.last_release.clone(),
            decision: Decision::Nullified,
            eps2_vector: vec![0.0; n],
            eps_opt: None,
            projected: state.projection_history.last().unwrap().clone(),
        };
        state.publications.push(record.clone());
        return record;
    }

    let mut eps_af = Vec::with_capacity(n);
    let mut eps_uf = Vec::with_capacity(n);
    let mut eps_fa = Vec::with_capacity(n);
    let mut eps_ub = Vec::with_capacity(n);
    let mut eps2 = Vec::with_capacity(n);
    for (user, req) in effective.iter().enumerate() {
        let entries = state.absorption_entries(user, t, req.forward_window);
        let af = entries
            .iter()
            .map(|e| {
                let border = state.spend_since(user, e, t) / e.share() + e.slot as f64 - 1.0;
                (t as f64 - border) * e.share()
            })
            .fold(0.0f64, f64::max);
        let uf = entries
            .iter()
            .map(|e| e.budget / 2.0 - state.spend_since(user, e, t))
            .fold(f64::INFINITY, f64::min);
        let fa = af.min(uf);
        let ub = state.backward_phase2_bound(t, user, req);
        eps_af.push(af);
        eps_uf.push(uf);
        eps_fa.push(fa);
        eps_ub.push(ub);
        eps2.push(fa.min(ub).max(0.0));
    }

    state.last_dpba_detail = Some(DpbaDetail {
        eps1: eps1.clone(),
        r_fn,
        r_fn_max,
        nullified: false,
        eps_af,
        eps_uf,
        eps_fa,
        eps_ub,
        eps2_bound: eps2.clone(),
    });

    let projected = state.projection_history.last().unwrap().clone();
    let st = crate::fixed::ReleaseState {
        ledger: &mut state.ledger,
        publications: &mut state.publications,
        last_release: &mut state.last_release,
        last_nonnull: &mut state.last_nonnull,
        last_nonnull_slot: &mut state.last_nonnull_slot,
        d,
    };
    finish_slot(st, batch, t, &eps1, eps2, dis, forced, projected, gen)
}
