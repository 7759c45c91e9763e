//! Structural gravity estimation and general-equilibrium counterfactual
//! analysis of free-trade agreements.
//!
//! The pipeline runs in three steps: a three-way fixed-effects PPML fit on a
//! bilateral panel recovers the agreement effect and pair trade costs; a
//! second-stage gravity regression completes the cost matrix; constrained
//! PPML re-estimation under an edited agreement indicator yields conditional
//! and full-endowment general-equilibrium effects.

// Float guards are written `!(x > 0.0)` on purpose so NaN fails them, and
// the dense kernels read best with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod balance;
pub mod costs;
pub mod ge;
pub mod panel;
pub mod ppml;
pub mod report;
pub mod scenario;

pub use panel::{CountryCode, IntervalPanel, Pair, PanelError, TradeObservation};
