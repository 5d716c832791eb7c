//! Per-user record of privacy spend, split into the two mechanism phases,
//! with O(1) window-sum queries backed by prefix sums.

use serde::{Deserialize, Serialize};

use crate::Error;

/// Which spend sequence a query addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Phase 1: private dissimilarity calculation.
    Calculation,
    /// Phase 2: noisy publication.
    Publication,
    /// Sum of both phases.
    Total,
}

/// Budget spend history for every user over slots `1..=current_slot`.
///
/// Entries are appended one full slot at a time and never mutated, so the
/// prefix sums are exact up to ordinary floating-point accumulation; window
/// sums agree with naive summation well within the crate tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    n_users: usize,
    current_slot: u64,
    /// `eps1[i][t-1]` is user i's phase-1 spend at slot t.
    eps1: Vec<Vec<f64>>,
    eps2: Vec<Vec<f64>>,
    /// `prefix1[i][t]` = sum of eps1 over slots 1..=t (index 0 is 0.0).
    prefix1: Vec<Vec<f64>>,
    prefix2: Vec<Vec<f64>>,
}

impl BudgetLedger {
    pub fn new(n_users: usize) -> Self {
        BudgetLedger {
            n_users,
            current_slot: 0,
            eps1: vec![Vec::new(); n_users],
            eps2: vec![Vec::new(); n_users],
            prefix1: vec![vec![0.0]; n_users],
            prefix2: vec![vec![0.0]; n_users],
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn current_slot(&self) -> u64 {
        self.current_slot
    }

    /// Appends one slot of spend for all users. Slots arrive in order.
    pub fn record_slot(&mut self, slot: u64, eps1: &[f64], eps2: &[f64]) {
        assert_eq!(slot, self.current_slot + 1, "slots must be recorded in order");
        assert_eq!(eps1.len(), self.n_users);
        assert_eq!(eps2.len(), self.n_users);
        for i in 0..self.n_users {
            assert!(eps1[i] >= 0.0 && eps2[i] >= 0.0, "spend must be nonnegative");
            self.eps1[i].push(eps1[i]);
            self.eps2[i].push(eps2[i]);
            let p1 = *self.prefix1[i].last().unwrap() + eps1[i];
            let p2 = *self.prefix2[i].last().unwrap() + eps2[i];
            self.prefix1[i].push(p1);
            self.prefix2[i].push(p2);
        }
        self.current_slot = slot;
    }

    /// Spend of one user at one already-recorded slot.
    pub fn spend_at(&self, user: usize, phase: Phase, slot: u64) -> f64 {
        assert!(slot >= 1 && slot <= self.current_slot, "slot out of range");
        let t = (slot - 1) as usize;
        match phase {
            Phase::Calculation => self.eps1[user][t],
            Phase::Publication => self.eps2[user][t],
            Phase::Total => self.eps1[user][t] + self.eps2[user][t],
        }
    }

    /// Sum of the requested phase over slots `from..=to` for one user.
    pub fn window_sum(&self, user: usize, phase: Phase, from: u64, to: u64) -> Result<f64, Error> {
        if user >= self.n_users {
            return Err(Error::invalid(format!("user {user} out of range")));
        }
        if from < 1 || from > to || to > self.current_slot {
            return Err(Error::SlotRange { from, to, current: self.current_slot });
        }
        let (a, b) = (from as usize, to as usize);
        let sum = match phase {
            Phase::Calculation => self.prefix1[user][b] - self.prefix1[user][a - 1],
            Phase::Publication => self.prefix2[user][b] - self.prefix2[user][a - 1],
            Phase::Total => {
                self.prefix1[user][b] - self.prefix1[user][a - 1] + self.prefix2[user][b]
                    - self.prefix2[user][a - 1]
            }
        };
        Ok(sum)
    }

    /// Like [`window_sum`](Self::window_sum) but with the window clamped to
    /// recorded slots; an empty clamped window sums to zero. Mechanisms use
    /// this for trailing windows that extend past slot 1.
    pub fn window_sum_clamped(&self, user: usize, phase: Phase, from: i64, to: i64) -> f64 {
        let from = from.max(1) as u64;
        if to < from as i64 || self.current_slot == 0 {
            return 0.0;
        }
        let to = (to as u64).min(self.current_slot);
        if from > to {
            return 0.0;
        }
        self.window_sum(user, phase, from, to).expect("clamped range is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_segment_is_zero() {
        let mut l = BudgetLedger::new(1);
        l.record_slot(1, &[0.0], &[0.0]);
        assert_eq!(l.window_sum(0, Phase::Total, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn phase_two_sum() {
        let mut l = BudgetLedger::new(1);
        l.record_slot(1, &[0.0], &[0.5]);
        l.record_slot(2, &[0.0], &[0.0]);
        l.record_slot(3, &[0.0], &[0.2]);
        let s = l.window_sum(0, Phase::Publication, 1, 3).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_error() {
        let mut l = BudgetLedger::new(1);
        l.record_slot(1, &[0.1], &[0.1]);
        assert!(l.window_sum(0, Phase::Total, 1, 2).is_err());
        assert!(l.window_sum(0, Phase::Total, 0, 1).is_err());
        assert!(l.window_sum(0, Phase::Total, 2, 1).is_err());
    }

    #[test]
    fn clamped_window_handles_prefix_slots() {
        let mut l = BudgetLedger::new(1);
        l.record_slot(1, &[0.1], &[0.2]);
        l.record_slot(2, &[0.1], &[0.3]);
        assert_eq!(l.window_sum_clamped(0, Phase::Publication, -3, 0), 0.0);
        let s = l.window_sum_clamped(0, Phase::Publication, -3, 2);
        assert!((s - 0.5).abs() < 1e-12);
    }

    /// Prefix-sum window queries must agree with a naive compensated loop
    /// on long random histories.
    #[test]
    fn prefix_matches_naive_loop() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let n_slots = 10_000u64;
        let mut l = BudgetLedger::new(1);
        let mut e1 = Vec::new();
        let mut e2 = Vec::new();
        for t in 1..=n_slots {
            let a = rng.gen_range(0.0..0.01);
            let b = rng.gen_range(0.0..0.01);
            l.record_slot(t, &[a], &[b]);
            e1.push(a);
            e2.push(b);
        }
        // Kahan-compensated oracle, independent of the prefix-sum path.
        let naive = |xs: &[f64], from: usize, to: usize| -> f64 {
            let mut sum = 0.0;
            let mut c = 0.0;
            for &x in &xs[from - 1..to] {
                let y = x - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        };
        for &(from, to) in &[(1u64, n_slots), (17, 9_321), (5_000, 5_000), (1, 1)] {
            let got = l.window_sum(0, Phase::Calculation, from, to).unwrap();
            let want = naive(&e1, from as usize, to as usize);
            assert!((got - want).abs() < 1e-9, "phase1 {from}..{to}: {got} vs {want}");
            let got = l.window_sum(0, Phase::Total, from, to).unwrap();
            let want = want + naive(&e2, from as usize, to as usize);
            assert!((got - want).abs() < 1e-9, "total {from}..{to}: {got} vs {want}");
        }
    }
}
