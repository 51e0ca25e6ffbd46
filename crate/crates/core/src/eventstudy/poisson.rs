use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// One observed unit-day.
#[derive(Debug, Clone)]
pub struct EventRow {
    /// Day index, strictly increasing within a series.
    pub day: u32,
    pub count: u64,
    /// Calendar month 1..=12.
    pub month: u8,
    /// Day of week 0..=6 (0 omitted from the dummy block).
    pub dow: u8,
    /// Index into the panel's period labels; `None` for the pre-shock baseline.
    pub period: Option<usize>,
    pub discount: bool,
}

/// Daily count series for one unit.
#[derive(Debug, Clone)]
pub struct EventSeries {
    pub unit_id: u64,
    pub rows: Vec<EventRow>,
}

/// Per-unit daily counts with the shared covariate layout.
#[derive(Debug, Clone)]
pub struct EventPanel {
    pub units: Vec<EventSeries>,
    pub period_labels: Vec<String>,
}

impl EventPanel {
    pub fn validate(&self) -> Result<()> {
        for series in &self.units {
            for (k, row) in series.rows.iter().enumerate() {
                if !(1..=12).contains(&row.month) {
                    return Err(Error::data_msg(format!(
                        "unit {} row {k}: month {} out of range",
                        series.unit_id, row.month
                    )));
                }
                if row.dow > 6 {
                    return Err(Error::data_msg(format!(
                        "unit {} row {k}: day-of-week {} out of range",
                        series.unit_id, row.dow
                    )));
                }
                if let Some(p) = row.period {
                    if p >= self.period_labels.len() {
                        return Err(Error::data_msg(format!(
                            "unit {} row {k}: period index {} out of range",
                            series.unit_id, p
                        )));
                    }
                }
                if k > 0 && series.rows[k - 1].day >= row.day {
                    return Err(Error::data_msg(format!(
                        "unit {} row {k}: days not strictly increasing",
                        series.unit_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sums daily counts over all units, producing the aggregate series.
    pub fn aggregate(&self) -> Result<EventSeries> {
        let first = self
            .units
            .first()
            .ok_or_else(|| Error::data_msg("empty event panel"))?;
        let mut rows = first.rows.clone();
        for series in &self.units[1..] {
            if series.rows.len() != rows.len() {
                return Err(Error::data_msg("units cover different date ranges"));
            }
            for (acc, row) in rows.iter_mut().zip(&series.rows) {
                acc.count += row.count;
            }
        }
        Ok(EventSeries { unit_id: u64::MAX, rows })
    }
}

/// Dense row-major design with named columns, time-ordered.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub y: Vec<f64>,
}

impl DesignMatrix {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Builds the structural-break design for one series: intercept, trend
/// rescaled to [0, 1], eleven month dummies (January omitted), one indicator
/// per period, six day-of-week dummies (dow 0 omitted), and the deep-discount
/// flag.
pub fn build_design(series: &EventSeries, period_labels: &[String]) -> Result<DesignMatrix> {
    if series.rows.len() < 2 {
        return Err(Error::data_msg(format!(
            "unit {}: need at least 2 rows",
            series.unit_id
        )));
    }
    let day0 = series.rows.first().unwrap().day as f64;
    let day1 = series.rows.last().unwrap().day as f64;
    let span = (day1 - day0).max(1.0);

    let mut names = vec!["intercept".to_string(), "trend".to_string()];
    for m in 2..=12 {
        names.push(format!("month_{m}"));
    }
    for label in period_labels {
        names.push(format!("period_{label}"));
    }
    for d in 1..=6 {
        names.push(format!("dow_{d}"));
    }
    names.push("discount".to_string());

    let cols = names.len();
    let mut data = Vec::with_capacity(series.rows.len() * cols);
    let mut y = Vec::with_capacity(series.rows.len());
    for row in &series.rows {
        let mut x = vec![0.0; cols];
        x[0] = 1.0;
        x[1] = (row.day as f64 - day0) / span;
        if row.month >= 2 {
            x[2 + (row.month as usize - 2)] = 1.0;
        }
        if let Some(p) = row.period {
            x[13 + p] = 1.0;
        }
        if row.dow >= 1 {
            x[13 + period_labels.len() + (row.dow as usize - 1)] = 1.0;
        }
        x[cols - 1] = if row.discount { 1.0 } else { 0.0 };
        data.extend_from_slice(&x);
        y.push(row.count as f64);
    }
    Ok(DesignMatrix {
        names,
        rows: series.rows.len(),
        cols,
        data,
        y,
    })
}

/// Poisson quasi-maximum-likelihood fit of one count series.
#[derive(Debug, Clone)]
pub struct QmleFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// Sandwich covariance (White when fit with lag 0).
    pub cov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub log_pseudo_likelihood: f64,
    pub converged: bool,
    /// Columns dropped for collinearity.
    pub dropped: Vec<String>,
    /// Coefficients pinned at the −20 separation guard.
    pub separation_guarded: Vec<String>,
    pub hac_lag: usize,
    /// Fitted means, time-ordered (kept for HAC recomputation).
    pub mu: Vec<f64>,
    pub design: DesignMatrix,
}

impl QmleFit {
    pub fn coef_by_name(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coef[i])
    }

    pub fn se_by_name(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.se[i])
    }
}

const SEPARATION_GUARD: f64 = -20.0;
const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON_ITER: usize = 200;

/// Newton iterations on the Poisson log-likelihood to gradient norm < 1e-10.
/// Coefficients are consistent for the conditional mean regardless of
/// overdispersion. White (lag-0) standard errors; see [`poisson_qmle_hac`]
/// for Newey–West.
pub fn poisson_qmle(design: &DesignMatrix) -> Result<QmleFit> {
    fit_with_lag(design.clone(), 0)
}

/// Poisson QMLE with Newey–West standard errors at the given lag.
pub fn poisson_qmle_hac(design: &DesignMatrix, lag: usize) -> Result<QmleFit> {
    fit_with_lag(design.clone(), lag)
}

fn fit_with_lag(mut design: DesignMatrix, lag: usize) -> Result<QmleFit> {
    if lag >= design.rows {
        return Err(Error::contract(format!(
            "HAC lag {lag} must be smaller than the {} observations",
            design.rows
        )));
    }
    let dropped = drop_collinear(&mut design);

    // Binary indicator columns whose covered days have all-zero counts push
    // their coefficient to −infinity; pin them at the guard and flag.
    let mut guarded: Vec<usize> = Vec::new();
    for j in 1..design.cols {
        let is_binary = (0..design.rows).all(|i| {
            let v = design.row(i)[j];
            v == 0.0 || v == 1.0
        });
        if !is_binary {
            continue;
        }
        let mut any_on = false;
        let mut count_on = 0.0;
        for i in 0..design.rows {
            if design.row(i)[j] == 1.0 {
                any_on = true;
                count_on += design.y[i];
            }
        }
        if any_on && count_on == 0.0 {
            guarded.push(j);
        }
    }

    let n = design.rows;
    let k = design.cols;
    let mean_y = design.y.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; k];
    beta[0] = (mean_y.max(1e-12)).ln();
    for &j in &guarded {
        beta[j] = SEPARATION_GUARD;
    }

    let mut converged = false;
    let mut mu = vec![0.0; n];
    for _ in 0..MAX_NEWTON_ITER {
        for i in 0..n {
            let eta: f64 = design.row(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
            mu[i] = eta.min(30.0).exp();
        }
        // gradient over free coefficients
        let free: Vec<usize> = (0..k).filter(|j| !guarded.contains(j)).collect();
        let mut grad = DVector::<f64>::zeros(free.len());
        let mut hess = DMatrix::<f64>::zeros(free.len(), free.len());
        for i in 0..n {
            let xi = design.row(i);
            let r = design.y[i] - mu[i];
            for (a, &ja) in free.iter().enumerate() {
                grad[a] += xi[ja] * r;
                for (b, &jb) in free.iter().enumerate() {
                    hess[(a, b)] += xi[ja] * mu[i] * xi[jb];
                }
            }
        }
        if grad.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        let chol = hess
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Inversion("singular Poisson Hessian".into()))?;
        let step = chol.solve(&grad);
        // Halve the step until the log-likelihood is finite (rarely needed).
        let mut scale = 1.0;
        for _ in 0..30 {
            let mut ok = true;
            for (a, &j) in free.iter().enumerate() {
                let b: f64 = beta[j] + scale * step[a];
                if !b.is_finite() || b.abs() > 1e3 {
                    ok = false;
                    break;
                }
            }
            if ok {
                break;
            }
            scale *= 0.5;
        }
        for (a, &j) in free.iter().enumerate() {
            beta[j] += scale * step[a];
        }
    }

    for i in 0..n {
        let eta: f64 = design.row(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
        mu[i] = eta.min(30.0).exp();
    }

    let cov = sandwich_cov(&design, &beta, &mu, lag, &guarded)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut se = vec![0.0; k];
    let mut z = vec![0.0; k];
    let mut p = vec![1.0; k];
    for j in 0..k {
        se[j] = cov[(j, j)].max(0.0).sqrt();
        if se[j] > 0.0 {
            z[j] = beta[j] / se[j];
            p[j] = 2.0 * (1.0 - normal.cdf(z[j].abs()));
        }
    }

    let ll: f64 = design
        .y
        .iter()
        .zip(&mu)
        .map(|(&yi, &mi): (&f64, &f64)| yi * mi.ln() - mi - ln_gamma(yi + 1.0))
        .sum();

    let guarded_names = guarded.iter().map(|&j| design.names[j].clone()).collect();
    Ok(QmleFit {
        names: design.names.clone(),
        coef: beta,
        cov,
        se,
        z,
        p,
        log_pseudo_likelihood: ll,
        converged,
        dropped,
        separation_guarded: guarded_names,
        hac_lag: lag,
        mu,
        design,
    })
}

/// Newey–West sandwich A⁻¹BA⁻¹ with Bartlett weights 1 − ℓ/(L+1) on the
/// score autocovariances. Needs time-ordered observations. At L = 0 this is
/// exactly the heteroskedasticity-robust (White) covariance.
pub fn newey_west_cov(fit: &QmleFit, lag: usize) -> Result<DMatrix<f64>> {
    if lag >= fit.design.rows {
        return Err(Error::contract(format!(
            "HAC lag {lag} must be smaller than the {} observations",
            fit.design.rows
        )));
    }
    let guarded: Vec<usize> = fit
        .separation_guarded
        .iter()
        .filter_map(|n| fit.names.iter().position(|m| m == n))
        .collect();
    sandwich_cov(&fit.design, &fit.coef, &fit.mu, lag, &guarded)
}

fn sandwich_cov(
    design: &DesignMatrix,
    _beta: &[f64],
    mu: &[f64],
    lag: usize,
    guarded: &[usize],
) -> Result<DMatrix<f64>> {
    let n = design.rows;
    let k = design.cols;
    // scores s_t = x_t (y_t − μ_t); bread A = Σ x x' μ
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let xi = design.row(i);
        let r = design.y[i] - mu[i];
        scores.push(DVector::from_iterator(k, xi.iter().map(|&x| x * r)));
        for ja in 0..k {
            for jb in 0..k {
                a[(ja, jb)] += xi[ja] * mu[i] * xi[jb];
            }
        }
    }
    let mut b = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        b += &scores[i] * scores[i].transpose();
    }
    for l in 1..=lag {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        for i in 0..n - l {
            let cross = &scores[i] * scores[i + l].transpose();
            b += w * (&cross + cross.transpose());
        }
    }
    // Guarded coefficients are pinned, not estimated: zero their rows/cols so
    // the bread stays invertible and their reported variance is zero.
    let mut a_free = a.clone();
    for &j in guarded {
        for m in 0..k {
            a_free[(j, m)] = 0.0;
            a_free[(m, j)] = 0.0;
            b[(j, m)] = 0.0;
            b[(m, j)] = 0.0;
        }
        a_free[(j, j)] = 1.0;
    }
    let a_inv = a_free
        .try_inverse()
        .ok_or_else(|| Error::Inversion("singular QMLE bread matrix".into()))?;
    let mut cov = &a_inv * b * &a_inv;
    for &j in guarded {
        cov[(j, j)] = 0.0;
    }
    Ok(cov)
}

/// Drops columns that are linearly dependent on earlier ones (Gram–Schmidt
/// with a relative pivot tolerance), returning the dropped names.
fn drop_collinear(design: &mut DesignMatrix) -> Vec<String> {
    let n = design.rows;
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..design.cols {
        let mut col: Vec<f64> = (0..n).map(|i| design.row(i)[j]).collect();
        let norm0: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for q in &basis {
            let proj: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            for (c, qv) in col.iter_mut().zip(q) {
                *c -= proj * qv;
            }
        }
        let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0.max(1.0) {
            for c in col.iter_mut() {
                *c /= norm;
            }
            basis.push(col);
            kept.push(j);
        } else {
            dropped.push(design.names[j].clone());
        }
    }
    if dropped.is_empty() {
        return dropped;
    }
    let mut data = Vec::with_capacity(n * kept.len());
    for i in 0..n {
        let row = design.row(i);
        data.extend(kept.iter().map(|&j| row[j]));
    }
    design.names = kept.iter().map(|&j| design.names[j].clone()).collect();
    design.cols = kept.len();
    design.data = data;
    dropped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_design(y: Vec<f64>, cols: Vec<(&str, Vec<f64>)>) -> DesignMatrix {
        let rows = y.len();
        let ncols = cols.len();
        let mut data = vec![0.0; rows * ncols];
        for (j, (_, col)) in cols.iter().enumerate() {
            for i in 0..rows {
                data[i * ncols + j] = col[i];
            }
        }
        DesignMatrix {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            rows,
            cols: ncols,
            data,
            y,
        }
    }

    #[test]
    fn intercept_only_recovers_log_mean() {
        let y = vec![3.0, 5.0, 4.0, 8.0, 0.0, 4.0];
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let d = simple_design(y, vec![("intercept", vec![1.0; 6])]);
        let fit = poisson_qmle(&d).unwrap();
        assert!(fit.converged);
        assert!((fit.coef[0] - mean.ln()).abs() < 1e-10);
    }

    #[test]
    fn two_group_design_matches_closed_form() {
        // group 0 mean 2.0, group 1 mean 6.0 → dummy coef = ln(6/2)
        let y = vec![1.0, 3.0, 2.0, 2.0, 5.0, 7.0, 6.0, 6.0];
        let g = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let d = simple_design(y, vec![("intercept", vec![1.0; 8]), ("group", g)]);
        let fit = poisson_qmle(&d).unwrap();
        assert!((fit.coef[0] - 2.0f64.ln()).abs() < 1e-9);
        assert!((fit.coef[1] - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn first_order_condition_holds_at_convergence() {
        let y = vec![2.0, 4.0, 3.0, 1.0, 6.0, 9.0, 2.0, 5.0, 4.0, 3.0];
        let x: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let d = simple_design(y, vec![("intercept", vec![1.0; 10]), ("trend", x)]);
        let fit = poisson_qmle(&d).unwrap();
        // Xᵀ(y − μ) = 0, which for the intercept column means fitted sums match.
        let resid_sum: f64 = d.y.iter().zip(&fit.mu).map(|(y, m)| y - m).sum();
        assert!(resid_sum.abs() < 1e-8);
    }

    #[test]
    fn separation_guard_pins_all_zero_period() {
        let y = vec![3.0, 4.0, 5.0, 0.0, 0.0, 0.0];
        let p = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let d = simple_design(y, vec![("intercept", vec![1.0; 6]), ("period_dead", p)]);
        let fit = poisson_qmle(&d).unwrap();
        assert_eq!(fit.separation_guarded, vec!["period_dead".to_string()]);
        assert_eq!(fit.coef[1], -20.0);
    }

    #[test]
    fn collinear_column_dropped_with_report() {
        let y = vec![2.0, 3.0, 4.0, 5.0];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = simple_design(
            y,
            vec![("intercept", vec![1.0; 4]), ("x", x), ("x_twice", x2)],
        );
        let fit = poisson_qmle(&d).unwrap();
        assert_eq!(fit.dropped, vec!["x_twice".to_string()]);
    }

    #[test]
    fn lag_zero_equals_white_covariance() {
        let y = vec![2.0, 4.0, 3.0, 1.0, 6.0, 9.0, 2.0, 5.0];
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let d = simple_design(y, vec![("intercept", vec![1.0; 8]), ("x", x)]);
        let fit = poisson_qmle(&d).unwrap();
        let white = newey_west_cov(&fit, 0).unwrap();
        let diff = (&fit.cov - &white).norm();
        assert!(diff < 1e-12);
    }

    #[test]
    fn hac_lag_must_be_below_sample_size() {
        let y = vec![1.0, 2.0, 3.0];
        let d = simple_design(y, vec![("intercept", vec![1.0; 3])]);
        let fit = poisson_qmle(&d).unwrap();
        assert!(newey_west_cov(&fit, 3).is_err());
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let y = vec![2.0, 4.0, 3.0, 1.0, 6.0, 9.0, 2.0, 5.0, 7.0, 1.0, 0.0, 3.0];
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        let d = simple_design(y, vec![("intercept", vec![1.0; 12]), ("x", x)]);
        let fit = poisson_qmle_hac(&d, 3).unwrap();
        let sym = (&fit.cov - fit.cov.transpose()).norm();
        assert!(sym < 1e-10);
        let eig = fit.cov.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10));
    }
}
