//! Streaming histogram publishing under per-user sliding-window privacy
//! budgets.
//!
//! The crate releases obfuscated count histograms over (conceptually
//! infinite) data streams while every user keeps an individual privacy
//! requirement: a budget that must bound the total privacy spend inside any
//! window of that user's chosen width. Two families of mechanisms are
//! provided:
//!
//! * fixed requirements: budget distribution ([`fixed::pbd_step`]) and
//!   budget absorption ([`fixed::pba_step`]), plus their homogeneous
//!   specializations and a uniform baseline;
//! * per-slot (dynamic) requirements with backward and forward windows:
//!   [`dynamic::dpbd_step`] and [`dynamic::dpba_step`].
//!
//! Every run records its spend in a [`ledger::BudgetLedger`]; the
//! [`evaluation`] module re-derives all window constraints from the ledger
//! so a trace can be audited independently of the mechanism that produced
//! it. The [`harness`] module drives parameter-grid experiments and the
//! `pwevent` binary exposes them on the command line.

pub mod bounds;
pub mod datagen;
pub mod dynamic;
pub mod error;
pub mod evaluation;
pub mod fixed;
pub mod harness;
pub mod ledger;
pub mod noise;
pub mod sampling;
pub mod types;

pub use error::Error;

/// Absolute tolerance for privacy-budget comparisons.
///
/// Long streams accumulate floating-point error against hard budget
/// constraints, so every budget comparison in the crate goes through this
/// tolerance rather than exact equality.
pub const BUDGET_TOL: f64 = 1e-9;
