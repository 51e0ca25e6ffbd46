//! Synthetic-market generator with known primitives (the oracle for every
//! recovery test), file I/O for all interchange formats, plain key=value
//! configuration, and the end-to-end pipeline.

mod io;
mod kv;
mod modelio;
mod pipeline;
mod simulate;
mod turnover;

pub use io::{
    file_bytes, read_choice_panel, read_csv_rows, read_embeddings, read_events_csv,
    read_events_daily_csv, read_hedonic_panel_csv, read_months_csv, read_prices_csv,
    read_purchases_csv, write_choice_panel, write_csv, write_embeddings, write_embeddings_text,
    write_events_csv, write_events_daily_csv, write_hedonic_panel_csv, write_months_csv,
    write_prices_csv, write_purchases_csv, EmbeddingFile,
};
pub use kv::KvConfig;
pub use modelio::{load_model, save_model, write_model_sidecar};
pub use pipeline::{reports_identical, run_pipeline, PipelineConfig, PipelineReport};
pub use simulate::{simulate_market, SimOutput};
pub use turnover::simulate_turnover_panel;

use crate::error::{Error, Result};

/// Generator configuration: everything the synthetic market needs to be
/// reproducible from (config, seed).
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_consumers: usize,
    pub n_items: usize,
    pub n_weeks: usize,
    /// Consumer embedding width fed to the demand model.
    pub user_dim: usize,
    /// Item feature width (demand t-net input and tower item input).
    pub item_dim: usize,
    /// Raw user features for tower training (a noisy rotation of the
    /// planted consumer embedding).
    pub user_feature_dim: usize,
    pub n_classes: usize,
    pub pi: Vec<f64>,
    /// Planted per-class price coefficients (each ≤ −0.1).
    pub alpha: Vec<f64>,
    /// Planted taste cluster count (items and consumers share it; item
    /// clusters double as product categories).
    pub taste_clusters: usize,
    /// Cluster centroid weight relative to unit noise.
    pub taste_separation: f64,
    /// Magnitude of the planted user taste projections.
    pub taste_scale: f64,
    /// Typical seasonal utility shift (sd of δ·t).
    pub seasonal_amplitude: f64,
    pub price_median: f64,
    pub price_p90: f64,
    pub markdown_freq: f64,
    pub markdown_depth_max: f64,
    /// Target inside share per choice occasion.
    pub inside_share: f64,
    pub occasions_per_week: usize,
    /// Event-study units and panel length.
    pub event_units: usize,
    pub event_days: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Desk-scale default: sized so the full acceptance suite runs in
    /// minutes (I = 2,000, J = 200, T = 30).
    pub fn desk_scale(seed: u64) -> Self {
        SimConfig {
            n_consumers: 2000,
            n_items: 200,
            n_weeks: 30,
            user_dim: 64,
            item_dim: 64,
            user_feature_dim: 32,
            n_classes: 2,
            pi: vec![0.4, 0.6],
            alpha: vec![-0.25, -0.12],
            taste_clusters: 4,
            taste_separation: 2.0,
            taste_scale: 1.5,
            seasonal_amplitude: 0.3,
            price_median: 15.0,
            price_p90: 30.0,
            markdown_freq: 0.3,
            markdown_depth_max: 0.6,
            inside_share: 0.04,
            occasions_per_week: 21,
            event_units: 10,
            event_days: 730,
            seed,
        }
    }

    /// Small configuration for smoke runs and the pipeline determinism gate.
    pub fn smoke(seed: u64) -> Self {
        SimConfig {
            n_consumers: 300,
            n_items: 40,
            n_weeks: 12,
            user_dim: 16,
            item_dim: 16,
            user_feature_dim: 12,
            occasions_per_week: 8,
            event_units: 6,
            event_days: 400,
            ..SimConfig::desk_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_consumers == 0 || self.n_items == 0 || self.n_weeks == 0 {
            return Err(Error::contract("counts must be >= 1"));
        }
        if self.pi.len() != self.n_classes || self.alpha.len() != self.n_classes {
            return Err(Error::contract("pi/alpha must have one entry per class"));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::contract("pi must lie on the open simplex"));
        }
        if self.alpha.iter().any(|&a| a > -0.1) {
            return Err(Error::contract("planted alphas must be <= -0.1"));
        }
        if !(0.0 < self.inside_share && self.inside_share < 1.0) {
            return Err(Error::contract("inside_share must be in (0,1)"));
        }
        if self.price_median <= 0.0 || self.price_p90 <= self.price_median {
            return Err(Error::contract("price quantiles must satisfy 0 < median < p90"));
        }
        Ok(())
    }
}

/// Ground truth retained by the generator; every recovery test scores
/// estimators against this, never against other estimates.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub alpha_class: Vec<f64>,
    pub alpha_by_consumer: Vec<f64>,
    pub class_labels: Vec<usize>,
    pub pi: Vec<f64>,
    /// Shared outside-good utility (zero by normalization; class biases
    /// carry the inside/outside tilt).
    pub v0: f64,
    pub class_bias: Vec<f64>,
    /// Planted user taste projections, [(i·C + c)·K ..].
    pub taste_r: Vec<f64>,
    /// Planted unit item projections, [(c·J + j)·K ..].
    pub taste_t: Vec<f64>,
    /// Planted monthly shifts, [(m−1)·K ..].
    pub delta: Vec<f64>,
    pub taste_rank: usize,
    pub item_cluster: Vec<usize>,
    pub consumer_cluster: Vec<usize>,
    /// True marginal costs used by supply round-trip checks.
    pub marginal_costs: Vec<f64>,
    /// Per event-study unit: planted period coefficients (one per period).
    pub event_kappa: Vec<Vec<f64>>,
    /// Planted regime label per event unit (two response regimes).
    pub event_regime: Vec<usize>,
    pub realized_inside_share: f64,
}
