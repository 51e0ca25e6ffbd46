use nalgebra::{DMatrix, DVector};

use super::HedonicPanel;
use crate::error::{Error, Result};

/// Fixed-base index from the pooled time-dummy hedonic: index_t is the
/// exponentiated month-dummy coefficient, base month pinned at 1.
#[derive(Debug, Clone)]
pub struct TimeDummySeries {
    pub months: Vec<u32>,
    pub index: Vec<f64>,
    /// Columns dropped for collinearity.
    pub dropped: Vec<String>,
}

/// Least-squares fit of log price on a reduced feature block plus month
/// dummies (base month omitted). `feature_cols` selects which panel feature
/// columns form the reduced block.
pub fn time_dummy_index(panel: &HedonicPanel, feature_cols: &[usize]) -> Result<TimeDummySeries> {
    panel.validate()?;
    if panel.rows.is_empty() {
        return Err(Error::contract("time_dummy_index on empty panel"));
    }
    for &c in feature_cols {
        if c >= panel.n_features {
            return Err(Error::shape("time_dummy feature column", panel.n_features, c));
        }
    }
    let months = panel.months();
    let n = panel.rows.len();
    let month_pos = |m: u32| months.iter().position(|&x| x == m).expect("known month");

    let mut names: Vec<String> = vec!["intercept".into()];
    names.extend(feature_cols.iter().map(|c| format!("feat_{c}")));
    for &m in &months[1..] {
        names.push(format!("month_{m}"));
    }
    let k = names.len();
    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut y = DVector::<f64>::zeros(n);
    for (i, row) in panel.rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, &c) in feature_cols.iter().enumerate() {
            x[(i, 1 + j)] = row.features[c];
        }
        let mp = month_pos(row.month);
        if mp > 0 {
            x[(i, feature_cols.len() + mp)] = 1.0;
        }
        y[i] = row.log_price;
    }

    // drop collinear columns (Gram–Schmidt with relative pivot tolerance)
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..k {
        let mut col = x.column(j).clone_owned();
        let norm0 = col.norm();
        for q in &basis {
            let proj = col.dot(q);
            col -= q * proj;
        }
        let norm = col.norm();
        if norm > 1e-8 * norm0.max(1.0) {
            basis.push(col / norm);
            kept.push(j);
        } else {
            dropped.push(names[j].clone());
        }
    }
    let xk = x.select_columns(kept.iter());
    let svd = xk.svd(true, true);
    let beta = svd
        .solve(&y, 1e-12)
        .map_err(|e| Error::Inversion(format!("time-dummy least squares: {e}")))?;

    let mut coef = vec![0.0; k];
    for (slot, &j) in kept.iter().enumerate() {
        coef[j] = beta[slot];
    }
    let mut index = vec![1.0];
    for mp in 1..months.len() {
        index.push(coef[feature_cols.len() + mp].exp());
    }
    Ok(TimeDummySeries {
        months,
        index,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hedonic::HedonicRow;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_panel(month_effects: &[f64]) -> HedonicPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut rows = Vec::new();
        for (m, &effect) in month_effects.iter().enumerate() {
            for i in 0..30u64 {
                let f0 = rng.random::<f64>();
                let f1 = rng.random::<f64>();
                rows.push(HedonicRow {
                    article_id: i,
                    month: m as u32,
                    log_price: 1.5 + 0.8 * f0 - 0.3 * f1 + effect,
                    quantity: 1.0,
                    features: vec![f0, f1],
                });
            }
        }
        HedonicPanel {
            rows,
            n_features: 2,
            month_col: None,
        }
    }

    #[test]
    fn recovers_planted_month_effects_exactly() {
        let effects = [0.0, -0.1, 0.25, -0.4];
        let panel = exact_panel(&effects);
        let series = time_dummy_index(&panel, &[0, 1]).unwrap();
        assert_eq!(series.index[0], 1.0);
        for (t, &e) in effects.iter().enumerate().skip(1) {
            assert!(
                (series.index[t] - e.exp()).abs() < 1e-8,
                "month {t}: {} vs {}",
                series.index[t],
                e.exp()
            );
        }
    }

    #[test]
    fn flat_prices_give_flat_index() {
        let panel = exact_panel(&[0.0, 0.0, 0.0]);
        let series = time_dummy_index(&panel, &[0, 1]).unwrap();
        for v in &series.index {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn collinear_feature_dropped_with_report() {
        let mut panel = exact_panel(&[0.0, -0.2]);
        for row in &mut panel.rows {
            let dup = row.features[0];
            row.features.push(dup);
        }
        panel.n_features = 3;
        let series = time_dummy_index(&panel, &[0, 1, 2]).unwrap();
        assert_eq!(series.dropped, vec!["feat_2".to_string()]);
    }
}
