//! Gradient-boosted hedonic surface, chained Jevons and hedonic-Fisher
//! indices, split-conformal uncertainty, and the nonlinear Oaxaca–Blinder
//! decomposition, with time-dummy and per-period variants.

mod conformal;
mod gbt;
mod indices;
mod oaxaca;
mod timedummy;

pub use conformal::{conformal_band, conformal_coverage_trial};
pub use gbt::{cross_fit_oof, fit_gbt, fit_gbt_any_size, GbtConfig, GbtEnsemble, Tree, TreeNode};
pub use indices::{fisher_chained, index_stress_band, jevons_index, per_period_index, IndexLink, IndexSeries};
pub use oaxaca::{deseasonalize_log_prices, ob_decompose, ObResult};
pub use timedummy::{time_dummy_index, TimeDummySeries};

use crate::error::{Error, Result};

/// One article-month observation: mean log price, quantity sold, and the
/// full feature block (item embedding plus extra columns; time features
/// included when the surface is pooled).
#[derive(Debug, Clone)]
pub struct HedonicRow {
    pub article_id: u64,
    /// Absolute month index (chainable across years).
    pub month: u32,
    pub log_price: f64,
    pub quantity: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HedonicPanel {
    pub rows: Vec<HedonicRow>,
    pub n_features: usize,
    /// Column carrying the month index inside `features`, for pooled
    /// surfaces where time enters as a feature.
    pub month_col: Option<usize>,
}

impl HedonicPanel {
    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.rows.iter().enumerate() {
            if row.features.len() != self.n_features {
                return Err(Error::shape(
                    format!("hedonic row {k} features"),
                    self.n_features,
                    row.features.len(),
                ));
            }
            if row.quantity < 0.0 {
                return Err(Error::data_msg(format!(
                    "article {} month {}: negative quantity",
                    row.article_id, row.month
                )));
            }
            if !row.log_price.is_finite() {
                return Err(Error::data_msg(format!(
                    "article {} month {}: non-finite log price",
                    row.article_id, row.month
                )));
            }
        }
        if let Some(c) = self.month_col {
            if c >= self.n_features {
                return Err(Error::shape("month_col", self.n_features, c));
            }
        }
        Ok(())
    }

    pub fn months(&self) -> Vec<u32> {
        let mut months: Vec<u32> = self.rows.iter().map(|r| r.month).collect();
        months.sort_unstable();
        months.dedup();
        months
    }

    /// Flattened (features, target, article) views for the learner.
    pub fn design(&self) -> (Vec<f64>, Vec<f64>, Vec<u64>) {
        let mut x = Vec::with_capacity(self.rows.len() * self.n_features);
        let mut y = Vec::with_capacity(self.rows.len());
        let mut ids = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            x.extend_from_slice(&row.features);
            y.push(row.log_price);
            ids.push(row.article_id);
        }
        (x, y, ids)
    }
}

/// Fits the pooled hedonic surface on the panel (month entering as a
/// feature) and returns the ensemble with out-of-fold predictions from a
/// 5-fold article-level cross-fit.
pub fn fit_hedonic_surface(
    panel: &HedonicPanel,
    cfg: &GbtConfig,
    seed: u64,
) -> Result<(GbtEnsemble, Vec<f64>)> {
    panel.validate()?;
    let (x, y, ids) = panel.design();
    let ensemble = fit_gbt(&x, panel.n_features, &y, cfg, seed)?;
    let oof = cross_fit_oof(&x, panel.n_features, &y, &ids, cfg, 5, seed)?;
    Ok((ensemble, oof))
}

/// Deterministic log-price prediction for one article's features.
pub fn predict_price(ensemble: &GbtEnsemble, features: &[f64]) -> Result<f64> {
    ensemble.predict(features)
}
