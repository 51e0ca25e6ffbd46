//! Policy experiments on a fitted demand+supply system: assortment pruning,
//! taste-space collapse, segmented pricing ladders, recommender validation,
//! and per-class scoring of unseen designs. Every experiment works on a
//! copied parameter view; the fitted model is never mutated.

mod collapse;
mod design;
mod ladder;
mod prune;
mod recval;

pub use collapse::{collapse_taste, CollapseResult};
pub use design::{kendall_tau, score_new_designs, DesignScore};
pub use ladder::{per_consumer_pricing_bound, segment_pricing_ladder, LadderResult};
pub use prune::{prune_assortment, PruneResult};
pub use recval::{recall_at_k, RecallReport, SliceRates};
