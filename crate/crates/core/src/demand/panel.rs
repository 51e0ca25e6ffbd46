use crate::error::{Error, Result};

/// One purchase event, index-based into the panel's catalogs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceEvent {
    pub consumer: usize,
    pub item: usize,
    pub week: usize,
}

/// Estimation panel: frozen consumer embeddings, item features, weekly
/// prices (NaN = not offered that week), purchase events, the week→month
/// map, and the control-function residuals.
#[derive(Debug, Clone)]
pub struct ChoicePanel {
    pub consumer_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub consumer_embeddings: Vec<f64>,
    pub user_dim: usize,
    pub item_features: Vec<f64>,
    pub item_dim: usize,
    /// Row-major J×T.
    pub prices: Vec<f64>,
    pub n_weeks: usize,
    pub events: Vec<ChoiceEvent>,
    /// Calendar month (1..=12) per week index.
    pub week_month: Vec<u8>,
    /// Per-product hedonic residual λ̂_j; zeros until computed.
    pub lambda_hat: Vec<f64>,
}

impl ChoicePanel {
    pub fn n_consumers(&self) -> usize {
        self.consumer_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, j, t) = (self.n_consumers(), self.n_items(), self.n_weeks);
        if self.consumer_embeddings.len() != i * self.user_dim {
            return Err(Error::shape(
                "consumer embeddings",
                i * self.user_dim,
                self.consumer_embeddings.len(),
            ));
        }
        if self.item_features.len() != j * self.item_dim {
            return Err(Error::shape("item features", j * self.item_dim, self.item_features.len()));
        }
        if self.prices.len() != j * t {
            return Err(Error::shape("price matrix", j * t, self.prices.len()));
        }
        if self.week_month.len() != t {
            return Err(Error::data_msg(format!(
                "month map covers {} weeks, panel has {t}",
                self.week_month.len()
            )));
        }
        if self.lambda_hat.len() != j {
            return Err(Error::shape("lambda_hat", j, self.lambda_hat.len()));
        }
        for (k, &m) in self.week_month.iter().enumerate() {
            if !(1..=12).contains(&m) {
                return Err(Error::data_msg(format!("week {k}: month {m} out of range")));
            }
        }
        for (idx, p) in self.prices.iter().enumerate() {
            if p.is_finite() && *p <= 0.0 {
                return Err(Error::data_msg(format!(
                    "item {} week {}: price {p} must be positive",
                    idx / t,
                    idx % t
                )));
            }
        }
        for (k, ev) in self.events.iter().enumerate() {
            if ev.consumer >= i || ev.item >= j || ev.week >= t {
                return Err(Error::data_msg(format!("event {k} out of range")));
            }
            if !self.price(ev.item, ev.week).is_finite() {
                return Err(Error::data_msg(format!(
                    "event {k}: item {} has no observed price in week {}",
                    self.item_ids[ev.item], ev.week
                )));
            }
        }
        Ok(())
    }

    pub fn price(&self, item: usize, week: usize) -> f64 {
        self.prices[item * self.n_weeks + week]
    }

    pub fn consumer_embedding(&self, i: usize) -> &[f64] {
        &self.consumer_embeddings[i * self.user_dim..(i + 1) * self.user_dim]
    }

    pub fn item_feature_row(&self, j: usize) -> &[f64] {
        &self.item_features[j * self.item_dim..(j + 1) * self.item_dim]
    }

    /// Choice set for a week: every product with an observed price.
    pub fn choice_set(&self, week: usize) -> Vec<usize> {
        (0..self.n_items())
            .filter(|&j| self.price(j, week).is_finite())
            .collect()
    }

    /// Mean observed price per item across weeks (the pooled market used by
    /// calibration and the one-shot inversion).
    pub fn mean_prices(&self) -> Vec<f64> {
        (0..self.n_items())
            .map(|j| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for t in 0..self.n_weeks {
                    let p = self.price(j, t);
                    if p.is_finite() {
                        sum += p;
                        n += 1;
                    }
                }
                if n > 0 {
                    sum / n as f64
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    /// Mean log observed price per item (control-function target).
    pub fn mean_log_prices(&self) -> Vec<f64> {
        (0..self.n_items())
            .map(|j| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for t in 0..self.n_weeks {
                    let p = self.price(j, t);
                    if p.is_finite() {
                        sum += p.ln();
                        n += 1;
                    }
                }
                if n > 0 {
                    sum / n as f64
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    /// Weeks split into (train, validation): validation = trailing fraction.
    pub fn week_split(&self, val_frac: f64) -> (Vec<usize>, Vec<usize>) {
        let n_val = ((self.n_weeks as f64 * val_frac).ceil() as usize)
            .max(1)
            .min(self.n_weeks - 1);
        let cut = self.n_weeks - n_val;
        ((0..cut).collect(), (cut..self.n_weeks).collect())
    }
}
