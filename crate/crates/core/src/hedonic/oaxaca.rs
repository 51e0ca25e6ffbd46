use nalgebra::{DMatrix, DVector};

use super::{GbtEnsemble, HedonicPanel};
use crate::error::{Error, Result};

/// Nonlinear Oaxaca–Blinder split of a mean log-price change into
/// composition and valuation, averaging the two reference-window
/// decompositions (the Cotton average). The residual ξ makes the identity
/// total = composition + valuation + ξ exact.
#[derive(Debug, Clone)]
pub struct ObResult {
    pub total: f64,
    pub composition: f64,
    pub valuation: f64,
    pub xi: f64,
}

fn mean_log_price(panel: &HedonicPanel) -> f64 {
    panel.rows.iter().map(|r| r.log_price).sum::<f64>() / panel.rows.len() as f64
}

fn mean_prediction(surface: &GbtEnsemble, panel: &HedonicPanel) -> Result<f64> {
    let mut sum = 0.0;
    for row in &panel.rows {
        sum += surface.predict(&row.features)?;
    }
    Ok(sum / panel.rows.len() as f64)
}

/// `f1` must be fit on `window1` rows and `f2` on `window2` rows
/// (period-specific fits).
pub fn ob_decompose(
    f1: &GbtEnsemble,
    f2: &GbtEnsemble,
    window1: &HedonicPanel,
    window2: &HedonicPanel,
) -> Result<ObResult> {
    if window1.rows.is_empty() || window2.rows.is_empty() {
        return Err(Error::contract("ob_decompose needs non-empty windows"));
    }
    window1.validate()?;
    window2.validate()?;
    let total = mean_log_price(window2) - mean_log_price(window1);
    let f1_t1 = mean_prediction(f1, window1)?;
    let f1_t2 = mean_prediction(f1, window2)?;
    let f2_t1 = mean_prediction(f2, window1)?;
    let f2_t2 = mean_prediction(f2, window2)?;
    let composition = 0.5 * ((f1_t2 - f1_t1) + (f2_t2 - f2_t1));
    let valuation = 0.5 * ((f2_t2 - f1_t2) + (f2_t1 - f1_t1));
    let xi = total - composition - valuation;
    Ok(ObResult {
        total,
        composition,
        valuation,
        xi,
    })
}

/// Month-of-year dummy partialling of log prices: regress log price on
/// calendar-month dummies over the pooled rows, keep residual + grand mean.
/// Used before the decomposition when a deseasonalized split is requested.
pub fn deseasonalize_log_prices(panels: &mut [&mut HedonicPanel]) -> Result<()> {
    let n: usize = panels.iter().map(|p| p.rows.len()).sum();
    if n == 0 {
        return Err(Error::contract("deseasonalize on empty panels"));
    }
    let mut x = DMatrix::<f64>::zeros(n, 12);
    let mut y = DVector::<f64>::zeros(n);
    let mut at = 0;
    for panel in panels.iter() {
        for row in &panel.rows {
            x[(at, (row.month % 12) as usize)] = 1.0;
            y[at] = row.log_price;
            at += 1;
        }
    }
    let grand_mean = y.mean();
    // cell means per calendar month; empty cells keep the grand mean
    let mut coef = [grand_mean; 12];
    for m in 0..12 {
        let rows: Vec<usize> = (0..n).filter(|&i| x[(i, m)] == 1.0).collect();
        if !rows.is_empty() {
            coef[m] = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        }
    }
    for panel in panels.iter_mut() {
        for row in &mut panel.rows {
            row.log_price = row.log_price - coef[(row.month % 12) as usize] + grand_mean;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hedonic::{fit_gbt_any_size, GbtConfig, HedonicRow};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_panel(seed: u64, month: u32, shift: f64, n: usize) -> HedonicPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let f: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                HedonicRow {
                    article_id: i as u64,
                    month,
                    log_price: 2.0 + shift + f[0] - 0.5 * f[1] + 0.1 * rng.random::<f64>(),
                    quantity: 1.0,
                    features: f,
                }
            })
            .collect();
        HedonicPanel {
            rows,
            n_features: 3,
            month_col: None,
        }
    }

    fn fit(panel: &HedonicPanel, seed: u64) -> GbtEnsemble {
        let (x, y, _) = panel.design();
        fit_gbt_any_size(&x, 3, &y, &GbtConfig { min_leaf: 5, ..GbtConfig::default() }, seed).unwrap()
    }

    #[test]
    fn identical_surfaces_give_zero_valuation() {
        let t1 = random_panel(1, 0, 0.0, 80);
        let t2 = random_panel(2, 1, -0.2, 80);
        let f = fit(&t1, 7);
        let res = ob_decompose(&f, &f, &t1, &t2).unwrap();
        assert!(res.valuation.abs() < 1e-14);
    }

    #[test]
    fn identical_windows_give_zero_composition() {
        let t1 = random_panel(3, 0, 0.0, 80);
        let f1 = fit(&t1, 8);
        let f2 = fit(&random_panel(4, 1, -0.3, 80), 9);
        let res = ob_decompose(&f1, &f2, &t1, &t1).unwrap();
        assert!(res.composition.abs() < 1e-14);
        assert!(res.total.abs() < 1e-14);
    }

    #[test]
    fn components_sum_to_total_exactly() {
        let t1 = random_panel(5, 0, 0.0, 100);
        let t2 = random_panel(6, 1, -0.25, 100);
        let f1 = fit(&t1, 10);
        let f2 = fit(&t2, 11);
        let res = ob_decompose(&f1, &f2, &t1, &t2).unwrap();
        assert!((res.total - (res.composition + res.valuation + res.xi)).abs() < 1e-12);
    }

    #[test]
    fn deseasonalize_removes_month_means() {
        let mut a = random_panel(7, 3, 0.4, 50);
        let mut b = random_panel(8, 9, -0.4, 50);
        deseasonalize_log_prices(&mut [&mut a, &mut b]).unwrap();
        let mean_a: f64 = a.rows.iter().map(|r| r.log_price).sum::<f64>() / 50.0;
        let mean_b: f64 = b.rows.iter().map(|r| r.log_price).sum::<f64>() / 50.0;
        assert!((mean_a - mean_b).abs() < 1e-10);
    }
}
