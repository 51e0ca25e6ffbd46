use nalgebra::{DMatrix, DVector};

use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};

/// Share-of-variance decomposition: model-predicted log shares regressed on
/// the price channel, the taste channel, and both.
#[derive(Debug, Clone)]
pub struct DecompositionR2 {
    pub r2_price: f64,
    pub r2_taste: f64,
    pub r2_both: f64,
}

/// Regresses log aggregate shares on per-item mean channel values. The
/// channels are mixture-weighted means over the view's consumers of
/// α_c(d_i)·p_j and (r_i^c + δ)·t_j^c.
pub fn decomposition_r2(compiled: &CompiledDemand, view: &MarketView) -> Result<DecompositionR2> {
    let n = view.items.len();
    if n < 3 {
        return Err(Error::contract("decomposition needs at least 3 items"));
    }
    let shares = view.aggregate_shares(compiled);
    let y: Vec<f64> = shares.iter().map(|s| s.max(1e-300).ln()).collect();

    let i_n = view.consumers.len() as f64;
    let mut price_chan = vec![0.0; n];
    let mut taste_chan = vec![0.0; n];
    let k = compiled.taste_rank;
    for &i in &view.consumers {
        for c in 0..compiled.n_classes {
            let w = compiled.pi[c] / i_n;
            let a = compiled.alpha_of(i, c);
            for (slot, p) in view.prices.iter().enumerate() {
                price_chan[slot] += w * a * p;
            }
            if k > 0 {
                let r = compiled.r_of(i, c);
                let rd: Vec<f64> = r.iter().zip(&view.delta).map(|(a, b)| a + b).collect();
                for (slot, &j) in view.items.iter().enumerate() {
                    let t = compiled.t_of(c, j);
                    taste_chan[slot] += w * rd.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    let r2 = |cols: &[&[f64]]| -> f64 {
        let p = cols.len() + 1;
        let mut x = DMatrix::<f64>::zeros(n, p);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for (j, col) in cols.iter().enumerate() {
                x[(i, j + 1)] = col[i];
            }
        }
        let yv = DVector::from_column_slice(&y);
        let svd = x.clone().svd(true, true);
        match svd.solve(&yv, 1e-12) {
            Ok(beta) => {
                let fitted = x * beta;
                let mean = yv.mean();
                let sst: f64 = yv.iter().map(|v| (v - mean) * (v - mean)).sum();
                let sse: f64 = yv
                    .iter()
                    .zip(fitted.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sst > 0.0 {
                    1.0 - sse / sst
                } else {
                    0.0
                }
            }
            Err(_) => f64::NAN,
        }
    };
    Ok(DecompositionR2 {
        r2_price: r2(&[&price_chan]),
        r2_taste: r2(&[&taste_chan]),
        r2_both: r2(&[&price_chan, &taste_chan]),
    })
}

/// Mean within-column coefficient of variation of cross-elasticities: the
/// IIA-departure summary. Zero for homogeneous plain logit, strictly
/// positive once heterogeneity breaks proportional substitution.
pub fn iia_column_cv(eps: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    let mut cols = 0usize;
    for l in 0..n {
        let vals: Vec<f64> = (0..n).filter(|&j| j != l).map(|j| eps[j * n + l]).collect();
        if vals.len() < 2 {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        if mean.abs() < 1e-300 {
            continue;
        }
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        total += var.sqrt() / mean.abs();
        cols += 1;
    }
    if cols > 0 {
        total / cols as f64
    } else {
        0.0
    }
}
