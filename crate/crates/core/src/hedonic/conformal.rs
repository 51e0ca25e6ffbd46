use crate::error::{Error, Result};

/// Split-conformal half-width: the ⌈(n+1)(1−α)⌉-th smallest absolute
/// residual from a calibration set never used to fit. On the price scale the
/// band is p̂·exp(±half-width) — symmetric in log space, asymmetric in EUR.
/// Refuses calibration sets too small for the quantile to exist.
pub fn conformal_band(residuals: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::contract(format!("alpha {alpha} must be in (0,1)")));
    }
    let n = residuals.len();
    let needed = (1.0 / alpha).ceil() as usize;
    if n < needed {
        return Err(Error::contract(format!(
            "conformal quantile undefined: need at least {needed} residuals at alpha {alpha}, got {n}"
        )));
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite residual"));
    let rank = (((n + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    let idx = rank.min(n) - 1;
    Ok(abs[idx])
}

/// One coverage Monte Carlo trial: band from `calibration`, empirical
/// coverage measured on `test`.
pub fn conformal_coverage_trial(calibration: &[f64], test: &[f64], alpha: f64) -> Result<f64> {
    let hw = conformal_band(calibration, alpha)?;
    let covered = test.iter().filter(|r| r.abs() <= hw).count();
    Ok(covered as f64 / test.len() as f64)
}
